"""The three pretraining loss terms and their weighted combination.

- self-supervision: InfoNCE between a segment's embedding and its augmented
  view, through the SS head;
- multimodal: InfoNCE from the MM head against frozen video embeddings plus
  the same against frozen text embeddings, each restricted to the aligned
  subset of the batch;
- nearest-neighbor: InfoNCE from the MM head against the cached IMU /
  video / text vectors of each sample's video-nearest queue entry.

Video/text embeddings and queue contents are constants: gradients never
flow into them. A single learnable log-temperature is shared across terms
by default; a per-term variant sits behind a config switch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .augment import AugmentConfig, augment_batch
from .encoder import EncoderParams, encode_backbone, head_mm, head_ss
from .errors import ConfigError, EmptyBatchError
from .feature_queue import FeatureQueue
from .nn_ops import info_nce
from .tensor import Tensor, add, scale, take_rows

TERMS = ("ss", "mm", "nn")

MM_STARVED = "mm-starved"
NN_STARVED = "nn-starved"
NN_WARMUP = "nn-warmup"


class Temperature:
    """Learnable log-temperature(s), clamped to tau in [tau_min, tau_max]."""

    def __init__(self, init: float = 0.07, per_term: bool = False,
                 tau_min: float = 0.01, tau_max: float = 1.0):
        if not tau_min < tau_max:
            raise ConfigError(f"need tau_min < tau_max, got {tau_min}, {tau_max}")
        if not tau_min <= init <= tau_max:
            raise ConfigError(f"initial tau {init} outside [{tau_min}, {tau_max}]")
        self.per_term = per_term
        self.tau_min = tau_min
        self.tau_max = tau_max
        names = TERMS if per_term else ("shared",)
        self._log_taus = {name: Tensor(np.array(math.log(init)), requires_grad=True)
                          for name in names}

    def term(self, name: str) -> Tensor:
        if name not in TERMS:
            raise ConfigError(f"unknown loss term '{name}'")
        return self._log_taus[name if self.per_term else "shared"]

    def parameters(self) -> list[Tensor]:
        return list(self._log_taus.values())

    def clamp(self) -> None:
        lo, hi = math.log(self.tau_min), math.log(self.tau_max)
        for t in self._log_taus.values():
            t.data = np.clip(t.data, lo, hi)

    def values(self) -> dict[str, float]:
        return {name: float(np.exp(t.data)) for name, t in self._log_taus.items()}


@dataclass
class LossConfig:
    """Term weights plus the learnable temperature they share."""

    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    tau_init: float = 0.07
    per_term_tau: bool = False
    temperature: Temperature = field(init=False)

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.alpha == 0 and self.beta == 0 and self.gamma == 0:
            raise ConfigError("at least one of alpha, beta, gamma must be > 0")
        self.temperature = Temperature(self.tau_init, per_term=self.per_term_tau)


@dataclass
class BatchView:
    """One mini-batch: raw IMU segments plus whatever embeddings are aligned.
    Unaligned samples participate in the self-supervision term only."""

    imu: np.ndarray                 # [n, C, T]
    video_emb: np.ndarray | None    # [n, d]; rows valid where video_mask
    video_mask: np.ndarray | None
    text_emb: np.ndarray | None
    text_mask: np.ndarray | None
    labels: np.ndarray | None = None

    @classmethod
    def from_dataset(cls, ds, indices: np.ndarray) -> "BatchView":
        return cls(
            imu=ds.imu[indices],
            video_emb=ds.video_emb[indices],
            video_mask=ds.video_mask[indices],
            text_emb=ds.text_emb[indices],
            text_mask=ds.text_mask[indices],
            labels=ds.labels[indices],
        )

    def __len__(self) -> int:
        return self.imu.shape[0]

    def aligned_video_rows(self) -> np.ndarray:
        if self.video_mask is None:
            return np.zeros(0, dtype=np.intp)
        return np.flatnonzero(self.video_mask)

    def aligned_text_rows(self) -> np.ndarray:
        if self.text_mask is None:
            return np.zeros(0, dtype=np.intp)
        return np.flatnonzero(self.text_mask)


@dataclass
class LossOutput:
    """Combined objective value plus per-term numbers for logging."""

    total: Tensor
    ss: float
    mm: float
    nn: float
    flags: frozenset[str]
    mm_embeddings: np.ndarray | None  # detached MM-head rows, for queue pushes


def _zero() -> Tensor:
    return Tensor(np.array(0.0))


def loss_ss(batch: BatchView, params: EncoderParams, rng: np.random.Generator,
            aug_cfg: AugmentConfig, log_tau: Tensor) -> Tensor:
    """InfoNCE between each segment and its augmented view (SS head)."""
    if len(batch) < 2:
        raise EmptyBatchError(f"self-supervision needs >= 2 segments, got {len(batch)}")
    anchors = head_ss(params, encode_backbone(params, batch.imu))
    augmented = augment_batch(batch.imu, rng, aug_cfg)
    targets = head_ss(params, encode_backbone(params, augmented))
    return info_nce(anchors, targets, log_tau)


def _subset_nce(anchor_rows: Tensor, target_data: np.ndarray, rows: np.ndarray,
                log_tau: Tensor) -> Tensor | None:
    """InfoNCE over a row subset; None when fewer than 2 rows participate."""
    if rows.size < 2:
        return None
    anchors = take_rows(anchor_rows, rows)
    targets = Tensor(target_data[rows])
    return info_nce(anchors, targets, log_tau)


def _loss_mm_from(mm_all: Tensor, batch: BatchView, log_tau: Tensor) -> tuple[Tensor, set[str]]:
    flags: set[str] = set()
    v_rows = batch.aligned_video_rows()
    t_rows = batch.aligned_text_rows()
    if v_rows.size == 0 and t_rows.size == 0:
        return _zero(), {MM_STARVED}
    total = _zero()
    term_v = _subset_nce(mm_all, batch.video_emb, v_rows, log_tau)
    if term_v is not None:
        total = add(total, term_v)
    term_t = _subset_nce(mm_all, batch.text_emb, t_rows, log_tau)
    if term_t is not None:
        total = add(total, term_t)
    return total, flags


def loss_mm(batch: BatchView, params: EncoderParams, log_tau: Tensor) -> tuple[Tensor, set[str]]:
    """IMU-to-video plus IMU-to-text InfoNCE on the aligned subsets.

    Either term is skipped (contributes 0) with fewer than 2 aligned
    samples; a batch with no aligned samples at all returns exact zero and
    the 'mm-starved' flag.
    """
    mm_all = head_mm(params, encode_backbone(params, batch.imu))
    return _loss_mm_from(mm_all, batch, log_tau)


def _loss_nn_from(mm_all: Tensor, batch: BatchView, queue: FeatureQueue,
                  log_tau: Tensor) -> tuple[Tensor, set[str]]:
    flags: set[str] = set()
    if len(queue) == 0:
        return _zero(), {NN_STARVED}
    rows = batch.aligned_video_rows()
    if rows.size < 2:
        return _zero(), flags
    hits = queue.batch_retrieve(batch.video_emb[rows])
    z_m, z_v, z_t, has_text = queue.gather(idx for idx, _ in hits)

    total = _zero()
    anchors = take_rows(mm_all, rows)
    for target_data in (z_m, z_v):
        total = add(total, info_nce(anchors, Tensor(target_data), log_tau))
    text_rows = np.flatnonzero(has_text)
    if text_rows.size >= 2:
        total = add(total, info_nce(take_rows(anchors, text_rows),
                                    Tensor(z_t[text_rows]), log_tau))
    return total, flags


def loss_nn(batch: BatchView, params: EncoderParams, queue: FeatureQueue,
            log_tau: Tensor) -> tuple[Tensor, set[str]]:
    """Nearest-neighbor supervision from the feature queue.

    Each video-aligned sample retrieves the queue entry with the most
    similar video vector; its cached IMU, video, and (when present) text
    vectors each contribute an InfoNCE term against the MM-head embedding.
    Queue contents are constants. An empty queue yields exact zero and the
    'nn-starved' flag.
    """
    if len(queue) == 0:
        return _zero(), {NN_STARVED}
    mm_all = head_mm(params, encode_backbone(params, batch.imu))
    return _loss_nn_from(mm_all, batch, queue, log_tau)


def combined_loss(batch: BatchView, params: EncoderParams, queue: FeatureQueue | None,
                  rng: np.random.Generator, loss_cfg: LossConfig,
                  aug_cfg: AugmentConfig, queue_min: int = 0) -> LossOutput:
    """Weighted sum of the three terms; a zero weight fully skips that
    term's computation. The backbone pass over the raw batch is shared
    between the MM and NN terms. Until the queue holds `queue_min` entries
    the NN term stays inactive (zero, flagged 'nn-warmup')."""
    temp = loss_cfg.temperature
    flags: set[str] = set()
    total = _zero()
    ss_val = mm_val = nn_val = 0.0
    mm_embeddings: np.ndarray | None = None

    if loss_cfg.alpha > 0:
        term = loss_ss(batch, params, rng, aug_cfg, temp.term("ss"))
        ss_val = term.item()
        total = add(total, scale(term, loss_cfg.alpha))

    if loss_cfg.beta > 0 or loss_cfg.gamma > 0:
        mm_all = head_mm(params, encode_backbone(params, batch.imu))
        mm_embeddings = mm_all.data.copy()
        if loss_cfg.beta > 0:
            term, f = _loss_mm_from(mm_all, batch, temp.term("mm"))
            mm_val = term.item()
            flags |= f
            total = add(total, scale(term, loss_cfg.beta))
        if loss_cfg.gamma > 0:
            if queue is None:
                raise ConfigError("gamma > 0 requires a feature queue")
            if 0 < len(queue) < queue_min:
                flags.add(NN_WARMUP)
            else:
                term, f = _loss_nn_from(mm_all, batch, queue, temp.term("nn"))
                nn_val = term.item()
                flags |= f
                total = add(total, scale(term, loss_cfg.gamma))

    return LossOutput(
        total=total,
        ss=ss_val,
        mm=mm_val,
        nn=nn_val,
        flags=frozenset(flags),
        mm_embeddings=mm_embeddings,
    )
