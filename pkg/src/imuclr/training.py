"""Pretraining loop: seeded mini-batches, combined objective, Adam,
temperature clamping, queue maintenance, JSONL step logs, and resumable
checkpoints.

Determinism contract: (dataset, TrainConfig) fully determine every logged
loss value and the final parameters. All per-epoch randomness (shuffling,
augmentation draws) is derived from (seed, epoch), so resuming from an
epoch-boundary checkpoint reproduces the uninterrupted run bit-exactly.
"""

from __future__ import annotations

import dataclasses
import io
import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
import numpy as np

from .augment import AugmentConfig
from .data import TripletDataset
from .encoder import (
    EncoderConfig,
    EncoderParams,
    init_encoder,
    read_encoder_section,
    write_encoder_section,
)
from .errors import ConfigError, CorruptDatasetError, TrainingDivergenceError
from .feature_queue import FeatureQueue, QueueEntry
from .losses import BatchView, LossConfig, LossOutput, combined_loss
from .optim import AdamState, adam_step
from .seeding import make_rng
from .tensor import Tape

logger = logging.getLogger(__name__)

APPENDIX_VERSION = 1


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 20
    lr: float = 1e-4
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    queue_capacity: int = 4096
    queue_min: int = 128
    checkpoint_every: int = 0  # in epochs; 0 = final checkpoint only

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.queue_capacity < 1 or self.queue_min < 0:
            raise ConfigError("queue_capacity must be >= 1 and queue_min >= 0")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["loss"].pop("temperature", None)
        out["encoder"]["conv_channels"] = list(out["encoder"]["conv_channels"])
        return out

    def digest_json(self) -> str:
        """Canonical JSON of the run-defining fields: epochs and checkpoint
        cadence are run control and may differ between a checkpoint and the
        run resuming from it."""
        out = self.to_dict()
        out.pop("epochs", None)
        out.pop("checkpoint_every", None)
        return json.dumps(out, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        raw = dict(raw)
        loss = LossConfig(**raw.pop("loss", {}))
        augment = AugmentConfig(**raw.pop("augment", {}))
        enc_raw = dict(raw.pop("encoder", {}))
        if "conv_channels" in enc_raw:
            enc_raw["conv_channels"] = tuple(enc_raw["conv_channels"])
        encoder = EncoderConfig(**enc_raw)
        return cls(loss=loss, augment=augment, encoder=encoder, **raw)


@dataclass
class TrainState:
    """Everything needed to continue a run bit-exactly from an epoch boundary."""

    config: TrainConfig
    params: EncoderParams
    adam: AdamState
    queue: FeatureQueue | None
    epoch: int = 0        # completed epochs
    global_step: int = 0

    def learnables(self):
        return self.params.parameters() + self.config.loss.temperature.parameters()


@dataclass
class PretrainResult:
    params: EncoderParams
    log: list[dict]
    state: TrainState
    checkpoint_path: str | None = None


def _validate_setup(ds: TripletDataset, cfg: TrainConfig) -> None:
    train_size = ds.train_indices.size
    if train_size < cfg.batch_size:
        raise ConfigError(
            f"training split has {train_size} segments, need >= batch_size "
            f"({cfg.batch_size})"
        )
    needs_aligned = cfg.loss.beta > 0 or cfg.loss.gamma > 0
    if needs_aligned:
        if not ds.video_mask[ds.train_indices].any() and not ds.text_mask[ds.train_indices].any():
            raise ConfigError(
                "beta/gamma > 0 require aligned video/text embeddings, but the "
                "training split has none"
            )
        if ds.embed_dim != cfg.encoder.embed_dim:
            raise ConfigError(
                f"encoder embed_dim {cfg.encoder.embed_dim} does not match dataset "
                f"embedding dim {ds.embed_dim}"
            )
    if ds.imu.shape[1] != cfg.encoder.in_channels:
        raise ConfigError(
            f"dataset has {ds.imu.shape[1]} channels, encoder expects "
            f"{cfg.encoder.in_channels}"
        )


def pretrain(ds: TripletDataset, cfg: TrainConfig, *,
             log_path: str | None = None,
             checkpoint_path: str | None = None,
             resume_from: str | None = None) -> PretrainResult:
    """Run (or resume) pretraining; returns trained parameters plus the
    per-step log. When `checkpoint_path` is given, a resumable checkpoint
    is written there at the configured cadence and at the end; on NaN
    divergence the last epoch-boundary snapshot is saved and a
    TrainingDivergenceError carrying its path is raised."""
    _validate_setup(ds, cfg)

    if resume_from is not None:
        state = load_checkpoint(resume_from, expect_config=cfg)
    else:
        params = init_encoder(cfg.encoder, make_rng(cfg.seed, "init"))
        queue = FeatureQueue(cfg.queue_capacity, cfg.encoder.embed_dim) \
            if cfg.loss.gamma > 0 else None
        state = TrainState(
            config=cfg,
            params=params,
            adam=AdamState.init(params.parameters() + cfg.loss.temperature.parameters(),
                                lr=cfg.lr),
            queue=queue,
        )
    cfg = state.config
    params = state.params
    temp = cfg.loss.temperature

    train_idx = ds.train_indices
    steps_per_epoch = train_idx.size // cfg.batch_size  # partial batches dropped
    if steps_per_epoch == 0:
        raise ConfigError("training split smaller than one batch")

    log_records: list[dict] = []
    log_file = open(log_path, "a") if log_path else None
    last_good: EncoderParams | None = None

    def snapshot_and_raise(message: str):
        path = None
        if checkpoint_path and last_good is not None:
            path = str(Path(checkpoint_path).with_suffix(".last_good.ckpt"))
            rescue = dataclasses.replace(state, params=last_good)
            save_checkpoint(path, rescue)
        raise TrainingDivergenceError(message, checkpoint_path=path)

    try:
        for epoch in range(state.epoch, cfg.epochs):
            order = make_rng(cfg.seed, "shuffle", epoch).permutation(train_idx)
            aug_rng = make_rng(cfg.seed, "augment", epoch)
            epoch_mm_contributed = False
            for b in range(steps_per_epoch):
                rows = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                batch = BatchView.from_dataset(ds, rows)
                learnables = state.learnables()
                for p in learnables:
                    p.grad = None
                with Tape() as tape:
                    out = combined_loss(batch, params, state.queue, aug_rng,
                                        cfg.loss, cfg.augment, queue_min=cfg.queue_min)
                    total_val = out.total.item()
                    if not np.isfinite(total_val):
                        snapshot_and_raise(
                            f"non-finite loss at step {state.global_step + 1}"
                        )
                    tape.backward(out.total)
                adam_step(learnables, [p.grad for p in learnables], state.adam)
                temp.clamp()
                state.global_step += 1

                if cfg.loss.gamma > 0 and out.mm_embeddings is not None:
                    _push_queue(state.queue, batch, out, state.global_step)
                if out.mm != 0.0:
                    epoch_mm_contributed = True

                record = {
                    "step": state.global_step,
                    "total": total_val,
                    "l_ss": out.ss,
                    "l_mm": out.mm,
                    "l_nn": out.nn,
                    "tau": _tau_scalar(temp),
                    "aligned_fraction": float(batch.video_mask.mean())
                    if batch.video_mask is not None else 0.0,
                }
                log_records.append(record)
                if log_file:
                    log_file.write(json.dumps(record) + "\n")

            state.epoch = epoch + 1
            last_good = params.copy()
            if checkpoint_path and cfg.checkpoint_every > 0 \
                    and state.epoch % cfg.checkpoint_every == 0:
                save_checkpoint(checkpoint_path, state)
            if cfg.loss.beta > 0 and not epoch_mm_contributed:
                logger.warning("epoch %d: multimodal loss starved on every batch", epoch)
    finally:
        if log_file:
            log_file.close()

    final_path = None
    if checkpoint_path:
        save_checkpoint(checkpoint_path, state)
        final_path = checkpoint_path
    return PretrainResult(params=params, log=log_records, state=state,
                          checkpoint_path=final_path)


def _tau_scalar(temp) -> float:
    vals = temp.values()
    return float(np.mean(list(vals.values())))


def _push_queue(queue: FeatureQueue, batch: BatchView, out: LossOutput,
                step: int) -> None:
    rows = batch.aligned_video_rows()
    entries = []
    for r in rows:
        z_t = batch.text_emb[r] if batch.text_mask is not None and batch.text_mask[r] else None
        entries.append(QueueEntry(
            z_m=out.mm_embeddings[r].copy(),
            z_v=batch.video_emb[r].copy(),
            z_t=None if z_t is None else z_t.copy(),
            insert_step=step,
        ))
    queue.push_batch(entries)


# ---------------------------------------------------------------------------
# Checkpoint files: encoder section (see encoder.py) followed by an appendix
# holding optimizer moments, temperature, queue contents, and progress
# counters; the appendix carries its own trailing CRC32.
# ---------------------------------------------------------------------------

def save_checkpoint(path: str, state: TrainState) -> None:
    buf = io.BytesIO()
    write_encoder_section(buf, state.params)
    appendix = _appendix_bytes(state)
    buf.write(struct.pack("<Q", len(appendix)))
    buf.write(appendix)
    buf.write(struct.pack("<I", zlib.crc32(appendix)))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def _appendix_bytes(state: TrainState) -> bytes:
    temp = state.config.loss.temperature
    meta = {
        "version": APPENDIX_VERSION,
        "epoch": state.epoch,
        "global_step": state.global_step,
        "adam": {
            "lr": state.adam.lr, "beta1": state.adam.beta1,
            "beta2": state.adam.beta2, "eps": state.adam.eps,
            "step": state.adam.step,
        },
        "temperature": {name: float(t.data) for name, t in temp._log_taus.items()},
        "queue_size": None if state.queue is None else state.queue.size,
        "train_config": state.config.to_dict(),
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = io.BytesIO()
    out.write(struct.pack("<I", len(meta_bytes)))
    out.write(meta_bytes)
    for kind in (state.adam.m, state.adam.v):
        for arr in kind:
            out.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    if state.queue is not None:
        z_m, z_v, z_t, has_text = state.queue._snapshot_views()
        steps = np.array([e.insert_step for e in state.queue.entries()], dtype="<i8")
        for arr in (z_m, z_v, z_t):
            out.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        out.write(has_text.astype("<u1").tobytes())
        out.write(steps.tobytes())
    return out.getvalue()


def load_checkpoint(path: str, expect_config: TrainConfig | None = None) -> TrainState:
    with open(path, "rb") as f:
        params = read_encoder_section(f)
        header = f.read(8)
        if len(header) != 8:
            raise CorruptDatasetError("checkpoint has no training appendix")
        (length,) = struct.unpack("<Q", header)
        appendix = f.read(length)
        tail = f.read(4)
    if len(appendix) != length or len(tail) != 4:
        raise CorruptDatasetError("checkpoint appendix truncated")
    (stored,) = struct.unpack("<I", tail)
    if zlib.crc32(appendix) != stored:
        raise CorruptDatasetError("checkpoint appendix CRC mismatch")

    view = io.BytesIO(appendix)
    (meta_len,) = struct.unpack("<I", view.read(4))
    meta = json.loads(view.read(meta_len).decode("utf-8"))
    if meta["version"] != APPENDIX_VERSION:
        raise CorruptDatasetError(f"unsupported appendix version {meta['version']}")

    cfg = TrainConfig.from_dict(meta["train_config"])
    if expect_config is not None:
        if expect_config.digest_json() != cfg.digest_json():
            raise ConfigError("checkpoint was produced with a different TrainConfig")
        cfg = expect_config  # adopt the caller's epochs / checkpoint cadence

    temp = cfg.loss.temperature
    for name, value in meta["temperature"].items():
        temp._log_taus[name].data = np.array(value)

    learnables = params.parameters() + temp.parameters()
    adam_meta = meta["adam"]
    adam = AdamState.init(learnables, lr=adam_meta["lr"], beta1=adam_meta["beta1"],
                          beta2=adam_meta["beta2"], eps=adam_meta["eps"])
    adam.step = adam_meta["step"]

    def read_arr(shape, dtype="<f8"):
        n = int(np.prod(shape)) if shape else 1
        width = np.dtype(dtype).itemsize
        raw = view.read(n * width)
        if len(raw) != n * width:
            raise CorruptDatasetError("checkpoint appendix truncated mid-array")
        return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()

    for slot in (adam.m, adam.v):
        for i, p in enumerate(learnables):
            slot[i] = read_arr(p.data.shape)

    queue = None
    if cfg.loss.gamma > 0:
        queue = FeatureQueue(cfg.queue_capacity, cfg.encoder.embed_dim)
        size = meta["queue_size"] or 0
        if size:
            d = cfg.encoder.embed_dim
            z_m = read_arr((size, d))
            z_v = read_arr((size, d))
            z_t = read_arr((size, d))
            has_text = read_arr((size,), "<u1").astype(bool)
            steps = read_arr((size,), "<i8")
            entries = [QueueEntry(z_m=z_m[i], z_v=z_v[i],
                                  z_t=z_t[i] if has_text[i] else None,
                                  insert_step=int(steps[i]))
                       for i in range(size)]
            queue.push_batch(entries)

    return TrainState(config=cfg, params=params, adam=adam, queue=queue,
                      epoch=meta["epoch"], global_step=meta["global_step"])
