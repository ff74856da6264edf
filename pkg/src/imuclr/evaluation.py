"""Linear-probe evaluation of frozen encoders.

Representation quality is measured by training a multinomial logistic
regression on MM-head embeddings with full-batch Adam to a gradient-norm
tolerance, then scoring accuracy on the held-out test split. Few-shot
protocols repeat this over seeded label subsets and report mean accuracy
with a standard error over trials.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import TripletDataset, sample_few_shot
from .encoder import EncoderParams, encode_backbone, head_mm
from .errors import DataError
from .nn_ops import cross_entropy
from .optim import AdamState, adam_step
from .seeding import make_rng
from .tensor import Tape, Tensor


@dataclass(frozen=True)
class ProbeConfig:
    lr: float = 0.1
    max_iters: int = 2000
    grad_tol: float = 1e-6
    seed: int = 0


@dataclass
class ProbeReport:
    """Few-shot evaluation result for one (task, n_per_class) cell."""

    task: str
    n_per_class: int
    accuracies: list[float]
    mean: float
    stderr: float
    trials: int
    single_trial: bool = False
    objective: str = ""
    aligned_fraction: float = 1.0

    @classmethod
    def from_accuracies(cls, task: str, n_per_class: int,
                        accuracies: list[float], **extra) -> "ProbeReport":
        trials = len(accuracies)
        mean = float(np.mean(accuracies))
        if trials > 1:
            stderr = float(np.std(accuracies, ddof=1) / math.sqrt(trials))
            single = False
        else:
            stderr = 0.0
            single = True
        return cls(task=task, n_per_class=n_per_class, accuracies=list(accuracies),
                   mean=mean, stderr=stderr, trials=trials, single_trial=single, **extra)


@dataclass
class CollapseDiagnostic:
    """Spectrum- and accuracy-based detection of representation collapse."""

    top_singular_ratio: float   # share of centered variance in the top direction
    probe_chance_gap: float     # probe accuracy minus 1/n_classes
    collapsed: bool


def extract_features(params: EncoderParams, ds: TripletDataset,
                     indices: np.ndarray | None = None,
                     batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """MM-head embeddings (unit rows) and labels; the encoder is untouched."""
    if not (ds.labels >= 0).any():
        raise DataError("dataset has no labels; cannot extract probe features")
    if indices is None:
        indices = np.arange(ds.n_segments)
    feats = []
    for start in range(0, indices.size, batch_size):
        rows = indices[start : start + batch_size]
        out = head_mm(params, encode_backbone(params, ds.imu[rows]))
        feats.append(out.data.copy())
    features = np.concatenate(feats) if feats else np.zeros((0, params.config.embed_dim))
    return features, ds.labels[indices].copy()


def linear_probe(features: np.ndarray, labels: np.ndarray,
                 train_idx: np.ndarray, eval_idx: np.ndarray,
                 cfg: ProbeConfig = ProbeConfig()) -> float:
    """Multinomial logistic regression on frozen features; returns eval
    accuracy. Full-batch Adam runs until the gradient norm drops below
    `grad_tol` or `max_iters` is hit."""
    train_idx = np.asarray(train_idx)
    eval_idx = np.asarray(eval_idx)
    if np.intersect1d(train_idx, eval_idx).size:
        raise DataError("train and eval indices overlap")
    y_train = labels[train_idx]
    classes = np.unique(labels[labels >= 0])
    if np.unique(y_train).size < 2:
        raise DataError("probe training set must contain >= 2 classes")
    k = int(classes.max()) + 1
    x = features[train_idx]
    onehot = np.eye(k)[y_train]
    m, d = x.shape

    w = np.zeros((d, k))
    b = np.zeros(k)
    w_t, b_t = Tensor(w), Tensor(b)
    state = AdamState.init([w_t, b_t], lr=cfg.lr)
    for _ in range(cfg.max_iters):
        logits = x @ w_t.data + b_t.data
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        delta = (p - onehot) / m
        gw = x.T @ delta
        gb = delta.sum(axis=0)
        gnorm = math.sqrt(float((gw * gw).sum() + (gb * gb).sum()))
        if gnorm < cfg.grad_tol:
            break
        adam_step([w_t, b_t], [gw, gb], state)

    eval_logits = features[eval_idx] @ w_t.data + b_t.data
    pred = eval_logits.argmax(axis=1)
    return float((pred == labels[eval_idx]).mean())


def few_shot_eval(params: EncoderParams, ds: TripletDataset,
                  n_per_class_list: list[int], trials: int = 5,
                  base_seed: int = 0, task: str = "probe",
                  probe_cfg: ProbeConfig = ProbeConfig(),
                  **report_extra) -> list[ProbeReport]:
    """For each shot count: `trials` seeded few-shot subsets, each probed
    and scored on the full held-out test split. Trial seeds are
    base_seed + trial so subsets pair up across the objectives being
    compared."""
    features, labels = extract_features(params, ds)
    test_idx = ds.test_indices
    if test_idx.size == 0:
        raise DataError("dataset has no test split")
    reports = []
    for n in n_per_class_list:
        accs = []
        for trial in range(trials):
            train_idx = sample_few_shot(ds, n, trial_seed=base_seed + trial)
            accs.append(linear_probe(features, labels, train_idx, test_idx, probe_cfg))
        reports.append(ProbeReport.from_accuracies(task, n, accs, **report_extra))
    return reports


def collapse_diagnostic(features: np.ndarray, probe_accuracy: float,
                        n_classes: int, ratio_threshold: float = 0.95,
                        gap_threshold: float = 0.02) -> CollapseDiagnostic:
    """Flag encoders that map everything to (nearly) one point.

    The spectrum test centers the features and asks whether the top
    singular direction holds almost all variance (or there is no variance
    at all); the accuracy test asks whether the probe is within a couple of
    points of chance."""
    centered = features - features.mean(axis=0, keepdims=True)
    sv = np.linalg.svd(centered, compute_uv=False)
    total = float((sv * sv).sum())
    if total < 1e-10:
        ratio = 1.0
    else:
        ratio = float(sv[0] * sv[0] / total)
    gap = probe_accuracy - 1.0 / n_classes
    return CollapseDiagnostic(
        top_singular_ratio=ratio,
        probe_chance_gap=gap,
        collapsed=bool(ratio > ratio_threshold or gap < gap_threshold),
    )


def standard_training_eval(ds: TripletDataset, encoder_cfg, n_per_class: int,
                           trials: int = 5, base_seed: int = 0,
                           lr: float = 1e-3, iters: int = 300) -> ProbeReport:
    """Baseline without pretraining: random init, then the encoder and a
    linear classifier are trained jointly on the few-shot labels. Included
    for completeness; not tuned."""
    from .encoder import init_encoder  # local import avoids a cycle at module load

    test_idx = ds.test_indices
    k = ds.n_classes
    accs = []
    for trial in range(trials):
        rng = make_rng(base_seed + trial, "standard-training")
        params = init_encoder(encoder_cfg, rng)
        w = Tensor(np.zeros((encoder_cfg.embed_dim, k)), requires_grad=True)
        b = Tensor(np.zeros(k), requires_grad=True)
        train_idx = sample_few_shot(ds, n_per_class, trial_seed=base_seed + trial)
        x = ds.imu[train_idx]
        y = ds.labels[train_idx]
        learnables = params.parameters() + [w, b]
        state = AdamState.init(learnables, lr=lr)
        for _ in range(iters):
            for p in learnables:
                p.grad = None
            with Tape() as tape:
                emb = head_mm(params, encode_backbone(params, x))
                logits = emb @ w + b
                loss = cross_entropy(logits, y)
                tape.backward(loss)
            adam_step(learnables, [p.grad for p in learnables], state)
        emb_test, _ = extract_features(params, ds, test_idx)
        pred = (emb_test @ w.data + b.data).argmax(axis=1)
        accs.append(float((pred == ds.labels[test_idx]).mean()))
    return ProbeReport.from_accuracies("standard-training", n_per_class, accs)
