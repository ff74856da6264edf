"""IMU encoder: stacked conv / group-norm / max-pool blocks feeding a GRU,
with two MLP projection heads (multimodal and self-supervision).

The multimodal head's output is the representation used downstream; the
self-supervision head exists only for the unimodal training term. Both
heads l2-normalize, so every similarity downstream is a cosine.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import asdict, dataclass
from typing import BinaryIO, Iterator

import numpy as np

from .errors import ConfigError, CorruptDatasetError, ShapeError
from .nn_ops import GruParams, conv1d, group_norm, gru_forward, l2_normalize, linear, max_pool1d
from .tensor import Tensor, as_tensor, relu

CHECKPOINT_MAGIC = b"IMUCLRCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 6
    conv_channels: tuple[int, ...] = (64, 128, 256)
    kernel: int = 7
    pool_window: int = 2
    gn_groups: int = 4
    gru_hidden: int = 256
    gru_layers: int = 2
    head_hidden: int = 256
    embed_dim: int = 512

    def __post_init__(self):
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if not self.conv_channels:
            raise ConfigError("conv_channels must be non-empty")
        for c in self.conv_channels:
            if c < 1 or c % self.gn_groups != 0:
                raise ConfigError(
                    f"conv_channels entries must be positive multiples of gn_groups "
                    f"({self.gn_groups}); got {c}"
                )
        for name in ("kernel", "pool_window", "gn_groups", "gru_hidden",
                     "gru_layers", "head_hidden", "embed_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")

    def min_input_length(self) -> int:
        """Smallest T for which the conv/pool stack leaves >= 1 timestep."""
        length = 1
        for _ in self.conv_channels:
            length = length * self.pool_window  # invert non-overlapping pool
            length = length + self.kernel - 1   # invert valid conv
        return length

    def output_length(self, t: int) -> int:
        if t < self.min_input_length():
            raise ShapeError(
                f"input length {t} too short; this config needs T >= {self.min_input_length()}"
            )
        for _ in self.conv_channels:
            t = t - self.kernel + 1
            t = (t - self.pool_window) // self.pool_window + 1
        return t

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "EncoderConfig":
        raw = json.loads(text)
        raw["conv_channels"] = tuple(raw["conv_channels"])
        return cls(**raw)


@dataclass
class ConvBlockParams:
    w: Tensor      # [C_out, C_in, k]
    b: Tensor      # [C_out]
    gamma: Tensor  # [C_out]
    beta: Tensor   # [C_out]


@dataclass
class HeadParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class EncoderParams:
    """All learnable weights, iterated in a fixed declaration order."""

    config: EncoderConfig
    blocks: list[ConvBlockParams]
    gru: list[GruParams]
    mm_head: HeadParams
    ss_head: HeadParams

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for i, blk in enumerate(self.blocks):
            yield f"block{i}.w", blk.w
            yield f"block{i}.b", blk.b
            yield f"block{i}.gamma", blk.gamma
            yield f"block{i}.beta", blk.beta
        for i, layer in enumerate(self.gru):
            yield f"gru{i}.w_x", layer.w_x
            yield f"gru{i}.w_h", layer.w_h
            yield f"gru{i}.b", layer.b
        for name, head in (("mm_head", self.mm_head), ("ss_head", self.ss_head)):
            yield f"{name}.w1", head.w1
            yield f"{name}.b1", head.b1
            yield f"{name}.w2", head.w2
            yield f"{name}.b2", head.b2

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def copy(self) -> "EncoderParams":
        clone = init_zero(self.config)
        for (_, dst), (_, src) in zip(clone.named_parameters(), self.named_parameters()):
            dst.data = src.data.copy()
        return clone

    def digest(self) -> str:
        """Content hash of all parameter values, for isolation checks."""
        crc = 0
        for _, p in self.named_parameters():
            crc = zlib.crc32(np.ascontiguousarray(p.data).tobytes(), crc)
        return f"{crc:08x}"


def param_count(params: EncoderParams) -> int:
    """Exact number of scalar learnables."""
    return sum(p.size for p in params.parameters())


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_zero(cfg: EncoderConfig) -> EncoderParams:
    """Zero-valued parameter set with the right shapes (checkpoint loading)."""
    blocks = []
    c_in = cfg.in_channels
    for c_out in cfg.conv_channels:
        blocks.append(ConvBlockParams(
            w=Tensor(np.zeros((c_out, c_in, cfg.kernel)), requires_grad=True),
            b=Tensor(np.zeros(c_out), requires_grad=True),
            gamma=Tensor(np.zeros(c_out), requires_grad=True),
            beta=Tensor(np.zeros(c_out), requires_grad=True),
        ))
        c_in = c_out
    gru = []
    d = cfg.conv_channels[-1]
    for _ in range(cfg.gru_layers):
        gru.append(GruParams(
            w_x=Tensor(np.zeros((d, 3 * cfg.gru_hidden)), requires_grad=True),
            w_h=Tensor(np.zeros((cfg.gru_hidden, 3 * cfg.gru_hidden)), requires_grad=True),
            b=Tensor(np.zeros(3 * cfg.gru_hidden), requires_grad=True),
        ))
        d = cfg.gru_hidden
    def head():
        return HeadParams(
            w1=Tensor(np.zeros((cfg.gru_hidden, cfg.head_hidden)), requires_grad=True),
            b1=Tensor(np.zeros(cfg.head_hidden), requires_grad=True),
            w2=Tensor(np.zeros((cfg.head_hidden, cfg.embed_dim)), requires_grad=True),
            b2=Tensor(np.zeros(cfg.embed_dim), requires_grad=True),
        )
    return EncoderParams(cfg, blocks, gru, head(), head())


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator) -> EncoderParams:
    """Fan-in-scaled uniform weights, zero biases, identity norm affines."""
    params = init_zero(cfg)
    for blk in params.blocks:
        c_out, c_in, k = blk.w.shape
        blk.w.data = _uniform(rng, (c_out, c_in, k), c_in * k)
        blk.gamma.data = np.ones(c_out)
    for layer in params.gru:
        d, three_h = layer.w_x.shape
        h = three_h // 3
        layer.w_x.data = _uniform(rng, (d, three_h), d)
        layer.w_h.data = _uniform(rng, (h, three_h), h)
    for head in (params.mm_head, params.ss_head):
        head.w1.data = _uniform(rng, head.w1.shape, head.w1.shape[0])
        head.w2.data = _uniform(rng, head.w2.shape, head.w2.shape[0])
    return params


def encode_backbone(params: EncoderParams, batch) -> Tensor:
    """Map a [n, C, T] batch to the final GRU hidden state [n, gru_hidden]."""
    x = as_tensor(batch)
    cfg = params.config
    if x.ndim != 3:
        raise ShapeError(f"encode_backbone expects [n, C, T], got shape {x.shape}")
    if x.shape[1] != cfg.in_channels:
        raise ShapeError(
            f"channel mismatch: batch axis 1 has {x.shape[1]}, config expects {cfg.in_channels}"
        )
    cfg.output_length(x.shape[2])  # raises with the minimum admissible T

    for blk in params.blocks:
        x = conv1d(x, blk.w, blk.b, stride=1)
        x = group_norm(x, cfg.gn_groups, blk.gamma, blk.beta)
        x = relu(x)
        x = max_pool1d(x, cfg.pool_window)
    final = None
    for layer in params.gru:
        x, final = gru_forward(x, layer)
    return final


def _apply_head(head: HeadParams, backbone_out: Tensor) -> Tensor:
    hidden = relu(linear(backbone_out, head.w1, head.b1))
    return l2_normalize(linear(hidden, head.w2, head.b2))


def head_mm(params: EncoderParams, backbone_out: Tensor) -> Tensor:
    """Multimodal projection head; rows unit-norm."""
    return _apply_head(params.mm_head, backbone_out)


def head_ss(params: EncoderParams, backbone_out: Tensor) -> Tensor:
    """Self-supervision projection head; rows unit-norm."""
    return _apply_head(params.ss_head, backbone_out)


def encode_mm(params: EncoderParams, batch) -> Tensor:
    return head_mm(params, encode_backbone(params, batch))


def encode_ss(params: EncoderParams, batch) -> Tensor:
    return head_ss(params, encode_backbone(params, batch))


# ---------------------------------------------------------------------------
# Checkpoint serialization
#
# Layout: magic, u32 version, u32 config-JSON length, config JSON, then the
# parameter arrays as little-endian float64 in declaration order, then a u32
# CRC32 of everything written so far. Training checkpoints append an opaque
# extra section after the CRC (see training.py); plain encoder loading stops
# at the CRC.
# ---------------------------------------------------------------------------

class _CrcWriter:
    def __init__(self, f: BinaryIO):
        self._f = f
        self.crc = 0

    def write(self, data: bytes) -> None:
        self._f.write(data)
        self.crc = zlib.crc32(data, self.crc)


def write_encoder_section(f: BinaryIO, params: EncoderParams) -> None:
    w = _CrcWriter(f)
    w.write(CHECKPOINT_MAGIC)
    w.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg_bytes = params.config.to_json().encode("utf-8")
    w.write(struct.pack("<I", len(cfg_bytes)))
    w.write(cfg_bytes)
    for _, p in params.named_parameters():
        w.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    f.write(struct.pack("<I", w.crc))


def read_encoder_section(f: BinaryIO) -> EncoderParams:
    crc = 0

    def read(n: int) -> bytes:
        nonlocal crc
        data = f.read(n)
        if len(data) != n:
            raise CorruptDatasetError("checkpoint truncated")
        crc = zlib.crc32(data, crc)
        return data

    if read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CorruptDatasetError("not an encoder checkpoint (bad magic)")
    (version,) = struct.unpack("<I", read(4))
    if version != CHECKPOINT_VERSION:
        raise CorruptDatasetError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", read(4))
    cfg = EncoderConfig.from_json(read(cfg_len).decode("utf-8"))
    params = init_zero(cfg)
    for _, p in params.named_parameters():
        raw = read(p.size * 8)
        p.data = np.frombuffer(raw, dtype="<f8").reshape(p.data.shape).copy()
    (stored,) = struct.unpack("<I", f.read(4))
    if stored != crc:
        raise CorruptDatasetError("checkpoint CRC mismatch")
    return params


def save_encoder(path: str, params: EncoderParams) -> None:
    buf = io.BytesIO()
    write_encoder_section(buf, params)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_encoder(path: str) -> EncoderParams:
    with open(path, "rb") as f:
        return read_encoder_section(f)
