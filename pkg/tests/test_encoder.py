"""Encoder configuration, initialization, forward pass, and checkpoints."""

import numpy as np
import pytest

from imuclr.encoder import (
    EncoderConfig,
    encode_backbone,
    head_mm,
    head_ss,
    init_encoder,
    init_zero,
    load_encoder,
    param_count,
    save_encoder,
)
from imuclr.errors import ConfigError, CorruptDatasetError, ShapeError
from imuclr.optim import grad_check
from imuclr.seeding import make_rng
from imuclr.tensor import Tape, Tensor, mul, tsum

from conftest import SMALL_ENCODER, TINY_ENCODER

RNG = np.random.default_rng(7)


def closed_form_count(cfg: EncoderConfig) -> int:
    """Independent hand computation of the learnable count."""
    total = 0
    c_in = cfg.in_channels
    for c_out in cfg.conv_channels:
        total += c_out * c_in * cfg.kernel + c_out  # conv w + b
        total += 2 * c_out                          # group-norm gamma + beta
        c_in = c_out
    d = cfg.conv_channels[-1]
    for _ in range(cfg.gru_layers):
        total += 3 * cfg.gru_hidden * d             # w_x
        total += 3 * cfg.gru_hidden * cfg.gru_hidden  # w_h
        total += 3 * cfg.gru_hidden                 # b
        d = cfg.gru_hidden
    per_head = (cfg.gru_hidden * cfg.head_hidden + cfg.head_hidden
                + cfg.head_hidden * cfg.embed_dim + cfg.embed_dim)
    return total + 2 * per_head


class TestConfig:
    def test_defaults_validate(self):
        EncoderConfig()

    def test_invalid_fields_name_the_field(self):
        with pytest.raises(ConfigError, match="gru_hidden"):
            EncoderConfig(gru_hidden=0)
        with pytest.raises(ConfigError, match="gn_groups"):
            EncoderConfig(conv_channels=(6,), gn_groups=4)
        with pytest.raises(ConfigError, match="non-empty"):
            EncoderConfig(conv_channels=())

    def test_min_input_length_matches_constructive_search(self):
        for cfg in (TINY_ENCODER, SMALL_ENCODER, EncoderConfig()):
            claimed = cfg.min_input_length()
            with pytest.raises(ShapeError):
                cfg.output_length(claimed - 1)
            assert cfg.output_length(claimed) >= 1

    def test_default_config_T100_ok_T8_raises(self):
        cfg = EncoderConfig()
        assert cfg.output_length(100) >= 1
        with pytest.raises(ShapeError, match="T >= 50"):
            cfg.output_length(8)

    def test_json_round_trip(self):
        cfg = SMALL_ENCODER
        assert EncoderConfig.from_json(cfg.to_json()) == cfg


class TestInit:
    def test_same_seed_bit_identical(self):
        a = init_encoder(SMALL_ENCODER, make_rng(5))
        b = init_encoder(SMALL_ENCODER, make_rng(5))
        for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert np.array_equal(pa.data, pb.data)

    def test_default_param_count_in_budget(self):
        params = init_encoder(EncoderConfig(), make_rng(0))
        count = param_count(params)
        assert count == closed_form_count(EncoderConfig())
        assert 1_100_000 <= count <= 1_700_000

    def test_count_matches_formula_on_small_configs(self):
        for cfg in (TINY_ENCODER, SMALL_ENCODER):
            params = init_zero(cfg)
            assert param_count(params) == closed_form_count(cfg)

    def test_count_independent_of_seed(self):
        a = init_encoder(SMALL_ENCODER, make_rng(1))
        b = init_encoder(SMALL_ENCODER, make_rng(2))
        assert param_count(a) == param_count(b)

    def test_biases_zero_gammas_one(self):
        params = init_encoder(SMALL_ENCODER, make_rng(3))
        for blk in params.blocks:
            assert np.array_equal(blk.b.data, np.zeros_like(blk.b.data))
            assert np.array_equal(blk.gamma.data, np.ones_like(blk.gamma.data))


class TestBackbone:
    def test_zero_input_zero_weights_zero_output(self):
        params = init_zero(SMALL_ENCODER)
        for blk in params.blocks:  # gamma stays 0 in init_zero: output collapses
            blk.gamma.data = np.ones_like(blk.gamma.data)
        out = encode_backbone(params, np.zeros((2, 6, 60)))
        np.testing.assert_array_equal(out.data, np.zeros((2, SMALL_ENCODER.gru_hidden)))

    @pytest.mark.parametrize("t", [30, 60, 101])
    def test_output_shape_contract(self, t, tiny_params):
        out = encode_backbone(tiny_params, RNG.normal(size=(3, 6, t)))
        assert out.shape == (3, TINY_ENCODER.gru_hidden)

    def test_temporal_underflow_reports_minimum(self, tiny_params):
        min_t = TINY_ENCODER.min_input_length()
        with pytest.raises(ShapeError, match=f"T >= {min_t}"):
            encode_backbone(tiny_params, RNG.normal(size=(2, 6, min_t - 1)))

    def test_channel_mismatch(self, tiny_params):
        with pytest.raises(ShapeError, match="channel"):
            encode_backbone(tiny_params, RNG.normal(size=(2, 5, 40)))

    def test_deterministic_forward(self, tiny_params):
        x = RNG.normal(size=(2, 6, 40))
        a = encode_backbone(tiny_params, x).data
        b = encode_backbone(tiny_params, x).data
        assert np.array_equal(a, b)


class TestHeads:
    def test_unit_norm_rows(self, tiny_params):
        h = encode_backbone(tiny_params, RNG.normal(size=(4, 6, 40)))
        for head in (head_mm, head_ss):
            norms = np.linalg.norm(head(tiny_params, h).data, axis=1)
            np.testing.assert_allclose(norms, 1.0, atol=1e-9)

    def test_identical_inputs_identical_embeddings(self, tiny_params):
        x = RNG.normal(size=(1, 6, 40))
        batch = np.concatenate([x, x])
        emb = head_mm(tiny_params, encode_backbone(tiny_params, batch)).data
        np.testing.assert_array_equal(emb[0], emb[1])

    def test_heads_differ_after_random_init(self, tiny_params):
        h = encode_backbone(tiny_params, RNG.normal(size=(2, 6, 40)))
        assert not np.allclose(head_mm(tiny_params, h).data,
                               head_ss(tiny_params, h).data)

    def test_gradcheck_through_head(self):
        params = init_encoder(TINY_ENCODER, make_rng(2))
        h_in = Tensor(RNG.normal(size=(3, TINY_ENCODER.gru_hidden)))
        proj = RNG.normal(size=(3, TINY_ENCODER.embed_dim))
        head = params.mm_head
        learnables = [head.w1, head.b1, head.w2, head.b2]

        def loss():
            return tsum(mul(head_mm(params, h_in), Tensor(proj)))

        assert grad_check(loss, learnables) < 1e-5

    def test_gradient_reaches_first_conv(self, tiny_params):
        tiny_params.zero_grad()
        x = RNG.normal(size=(3, 6, 40))
        with Tape() as tape:
            emb = head_mm(tiny_params, encode_backbone(tiny_params, x))
            tape.backward(tsum(mul(emb, Tensor(RNG.normal(size=emb.shape)))))
        g = tiny_params.blocks[0].w.grad
        assert g is not None and np.linalg.norm(g) > 0
        tiny_params.zero_grad()


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        params = init_encoder(SMALL_ENCODER, make_rng(8))
        path = str(tmp_path / "enc.ckpt")
        save_encoder(path, params)
        loaded = load_encoder(path)
        assert loaded.config == SMALL_ENCODER
        for (na, pa), (nb, pb) in zip(params.named_parameters(),
                                      loaded.named_parameters()):
            assert na == nb
            assert np.array_equal(pa.data, pb.data)

    def test_truncated_file_rejected(self, tmp_path):
        params = init_encoder(TINY_ENCODER, make_rng(8))
        path = tmp_path / "enc.ckpt"
        save_encoder(str(path), params)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(CorruptDatasetError):
            load_encoder(str(path))

    def test_bit_flip_fails_crc(self, tmp_path):
        params = init_encoder(TINY_ENCODER, make_rng(8))
        path = tmp_path / "enc.ckpt"
        save_encoder(str(path), params)
        raw = bytearray(path.read_bytes())
        raw[len(raw) // 2] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CorruptDatasetError):
            load_encoder(str(path))

    def test_digest_tracks_content(self):
        a = init_encoder(TINY_ENCODER, make_rng(1))
        b = init_encoder(TINY_ENCODER, make_rng(1))
        assert a.digest() == b.digest()
        b.blocks[0].w.data = b.blocks[0].w.data + 1e-9
        assert a.digest() != b.digest()
