"""Shared fixtures: small datasets and encoder configs sized for fast tests."""

from __future__ import annotations

import numpy as np
import pytest

from imuclr.data import SyntheticSpec, gen_synthetic
from imuclr.encoder import EncoderConfig, init_encoder
from imuclr.seeding import make_rng

TINY_ENCODER = EncoderConfig(
    conv_channels=(8, 8),
    kernel=5,
    pool_window=2,
    gn_groups=4,
    gru_hidden=8,
    gru_layers=1,
    head_hidden=8,
    embed_dim=16,
)

SMALL_ENCODER = EncoderConfig(
    conv_channels=(8, 16),
    kernel=5,
    pool_window=2,
    gn_groups=4,
    gru_hidden=16,
    gru_layers=1,
    head_hidden=16,
    embed_dim=16,
)


@pytest.fixture(scope="session")
def small_dataset():
    """4 classes x 40 segments, T=60, d=16: enough for training smoke tests."""
    return gen_synthetic(SyntheticSpec(
        n_classes=4, segments_per_class=40, T=60, embed_dim=16, seed=1,
    ))


@pytest.fixture(scope="session")
def tiny_params():
    return init_encoder(TINY_ENCODER, make_rng(0, "tiny"))


def unit_rows(a: np.ndarray) -> np.ndarray:
    return a / np.linalg.norm(a, axis=1, keepdims=True)
