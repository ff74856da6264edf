"""Stochastic IMU augmentations: random magnitude scaling and time reversal.

Every call consumes a fixed number of RNG draws regardless of outcome
(1 scale draw per segment, or C with per-channel scaling, plus 1 reversal
coin), so parallel streams stay aligned across configurations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class AugmentConfig:
    scale_low: float = 0.5
    scale_high: float = 2.0
    p_reverse: float = 0.5
    per_channel_scale: bool = False

    def __post_init__(self):
        if self.scale_low <= 0:
            raise ConfigError(f"scale_low must be > 0, got {self.scale_low}")
        if self.scale_high < self.scale_low:
            raise ConfigError(
                f"scale_high ({self.scale_high}) must be >= scale_low ({self.scale_low})"
            )
        if not 0.0 <= self.p_reverse <= 1.0:
            raise ConfigError(f"p_reverse must be in [0, 1], got {self.p_reverse}")


IDENTITY_AUGMENT = AugmentConfig(scale_low=1.0, scale_high=1.0, p_reverse=0.0)


def _draw_scale(u: np.ndarray, cfg: AugmentConfig) -> np.ndarray:
    # Log-uniform in [scale_low, scale_high]; degenerate range returns the
    # bound exactly so an identity config is bit-transparent.
    if cfg.scale_high == cfg.scale_low:
        return np.full_like(u, cfg.scale_low)
    lo, hi = np.log(cfg.scale_low), np.log(cfg.scale_high)
    return np.exp(lo + u * (hi - lo))


def random_scale(segment: np.ndarray, rng: np.random.Generator,
                 cfg: AugmentConfig) -> np.ndarray:
    """Multiply by a random factor; one per channel if configured."""
    if cfg.per_channel_scale:
        u = rng.random(segment.shape[0])
        return segment * _draw_scale(u, cfg)[:, None]
    u = rng.random(1)
    return segment * _draw_scale(u, cfg)[0]


def time_reverse(segment: np.ndarray) -> np.ndarray:
    """Reverse the sample order of every channel."""
    return segment[..., ::-1].copy()


def apply_h(segment: np.ndarray, rng: np.random.Generator,
            cfg: AugmentConfig) -> np.ndarray:
    """Random scaling always, then time reversal with probability p_reverse."""
    out = random_scale(segment, rng, cfg)
    if rng.random() < cfg.p_reverse:
        out = time_reverse(out)
    return out


def augment_batch(batch: np.ndarray, rng: np.random.Generator,
                  cfg: AugmentConfig) -> np.ndarray:
    """apply_h over the leading axis of an [n, C, T] batch, in order."""
    return np.stack([apply_h(seg, rng, cfg) for seg in batch])
