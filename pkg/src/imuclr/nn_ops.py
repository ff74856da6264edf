"""Differentiable building blocks: 1-d convolution, group norm, pooling,
GRU recurrence, affine layers, row normalization, and the InfoNCE kernel.

All functions compose the primitives from `tensor`, so reverse-mode
gradients come for free; `conv1d` and `max_pool1d` carry hand-derived
adjoints for speed. Sequence operands may be given unbatched (`[C, T]`) or
batched (`[n, C, T]`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    ConfigError,
    ContractViolationError,
    DegenerateEmbeddingError,
    EmptyBatchError,
    ShapeError,
)
from .tensor import (
    Array,
    Tensor,
    _record,
    add,
    as_tensor,
    exp,
    index,
    log,
    matmul,
    mul,
    neg,
    reshape,
    scale,
    sigmoid,
    sqrt,
    stack,
    sub,
    tanh,
    transpose,
    tsum,
)

GROUP_NORM_EPS = 1e-8

# Debug hook: when enabled, conv1d deliberately corrupts its weight adjoint
# so gradient-checker sensitivity can be demonstrated end to end.
_ADJOINT_FAULT = False


def set_adjoint_fault(enabled: bool) -> None:
    global _ADJOINT_FAULT
    _ADJOINT_FAULT = bool(enabled)


def _promote_seq(x: Tensor, name: str) -> tuple[Tensor, bool]:
    """Lift `[C, T]` to `[1, C, T]`; reject anything else but 3-d."""
    if x.ndim == 2:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 3:
        return x, False
    raise ShapeError(f"{name} expects a 2-d or 3-d input, got shape {x.shape}")


def conv1d(inp, weight: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Valid-padding cross-correlation along the last axis."""
    x, squeeze = _promote_seq(as_tensor(inp), "conv1d")
    if weight.ndim != 3:
        raise ShapeError(f"conv1d weight must be [C_out, C_in, k], got {weight.shape}")
    n, c_in, t = x.shape
    c_out, w_cin, k = weight.shape
    if w_cin != c_in:
        raise ShapeError(
            f"conv1d channel mismatch: input axis 1 has {c_in}, weight axis 1 has {w_cin}"
        )
    if bias.shape != (c_out,):
        raise ShapeError(f"conv1d bias must be [{c_out}], got {bias.shape}")
    if t < k:
        raise ShapeError(f"conv1d input length {t} (axis 2) shorter than kernel {k}")
    if stride < 1:
        raise ConfigError(f"conv1d stride must be >= 1, got {stride}")

    t_out = (t - k) // stride + 1
    windows = sliding_window_view(x.data, k, axis=2)[:, :, ::stride, :]
    xm = windows.transpose(0, 2, 1, 3).reshape(n * t_out, c_in * k)
    wm = weight.data.reshape(c_out, c_in * k)
    out = (xm @ wm.T).reshape(n, t_out, c_out).transpose(0, 2, 1) + bias.data[None, :, None]

    def vjp(g: Array):
        gm = g.transpose(0, 2, 1).reshape(n * t_out, c_out)
        gw = (gm.T @ xm).reshape(c_out, c_in, k)
        if _ADJOINT_FAULT:
            gw = gw * 1.05
        gxw = (gm @ wm).reshape(n, t_out, c_in, k).transpose(0, 2, 1, 3)
        gx = np.zeros((n, c_in, t))
        for j in range(k):
            gx[:, :, j : j + stride * (t_out - 1) + 1 : stride] += gxw[:, :, :, j]
        return gx, gw, g.sum(axis=(0, 2))

    out_t = _record(out, (x, weight, bias), vjp)
    return reshape(out_t, (c_out, t_out)) if squeeze else out_t


def max_pool1d(inp, window: int, stride: int | None = None) -> Tensor:
    """Per-window maximum; gradient routes to the first maximal index."""
    x, squeeze = _promote_seq(as_tensor(inp), "max_pool1d")
    stride = window if stride is None else stride
    n, c, t = x.shape
    if window > t:
        raise ShapeError(f"max_pool1d window {window} exceeds input length {t} (axis 2)")
    if window < 1 or stride < 1:
        raise ConfigError(f"max_pool1d window/stride must be >= 1, got {window}/{stride}")

    windows = sliding_window_view(x.data, window, axis=2)[:, :, ::stride, :]
    t_out = windows.shape[2]
    argmax = windows.argmax(axis=3)
    out = np.take_along_axis(windows, argmax[..., None], axis=3)[..., 0]

    def vjp(g: Array):
        gx = np.zeros((n, c, t))
        n_i, c_i, _ = np.ogrid[:n, :c, :t_out]
        pos = argmax + (np.arange(t_out) * stride)[None, None, :]
        np.add.at(gx, (n_i, c_i, pos), g)
        return (gx,)

    out_t = _record(out, (x,), vjp)
    return reshape(out_t, (c, t_out)) if squeeze else out_t


def group_norm(inp, num_groups: int, gamma: Tensor, beta: Tensor,
               eps: float = GROUP_NORM_EPS) -> Tensor:
    """Normalize each (sample, group) slice to zero mean / unit variance,
    then apply the per-channel affine."""
    x, squeeze = _promote_seq(as_tensor(inp), "group_norm")
    n, c, t = x.shape
    if num_groups < 1 or c % num_groups != 0:
        raise ConfigError(f"channel count {c} not divisible by num_groups {num_groups}")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm affine must be [{c}], got {gamma.shape}/{beta.shape}")

    per = (c // num_groups) * t
    xg = reshape(x, (n, num_groups, per))
    mu = scale(tsum(xg, axis=2, keepdims=True), 1.0 / per)
    xc = sub(xg, mu)
    var = scale(tsum(mul(xc, xc), axis=2, keepdims=True), 1.0 / per)
    xhat = mul(xc, _rsqrt(add(var, eps)))
    normed = reshape(xhat, (n, c, t))
    out = add(mul(normed, reshape(gamma, (1, c, 1))), reshape(beta, (1, c, 1)))
    return reshape(out, (c, t)) if squeeze else out


def _rsqrt(a) -> Tensor:
    return 1.0 / sqrt(a)


def linear(inp, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map for row-major batches: `inp @ weight + bias`."""
    x = as_tensor(inp)
    if x.ndim != 2:
        raise ShapeError(f"linear expects [n, D] input, got {x.shape}")
    if weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(
            f"linear dimension mismatch: input axis 1 has {x.shape[1]}, "
            f"weight axis 0 has {weight.shape[0]}"
        )
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear bias must be [{weight.shape[1]}], got {bias.shape}")
    return add(matmul(x, weight), bias)


def l2_normalize(inp) -> Tensor:
    """Scale every row of an [n, d] tensor to unit Euclidean norm."""
    x = as_tensor(inp)
    if x.ndim != 2:
        raise ShapeError(f"l2_normalize expects [n, d] input, got {x.shape}")
    sq = tsum(mul(x, x), axis=1, keepdims=True)
    norms = np.sqrt(sq.data[:, 0])
    if np.any(norms <= 1e-12):
        bad = int(np.argmin(norms))
        raise DegenerateEmbeddingError(
            f"row {bad} has norm {norms[bad]:.3e}; cannot normalize"
        )
    return mul(x, _rsqrt(sq))


@dataclass
class GruParams:
    """One GRU layer. Gate columns are laid out [reset | update | candidate].

    Recurrence (sigma = logistic, h = previous hidden state):
        gx = x_t @ w_x + b          gh = h @ w_h
        r  = sigma(gx_r + gh_r)     z = sigma(gx_z + gh_z)
        c  = tanh(gx_c + r * gh_c)
        h' = (1 - z) * c + z * h
    """

    w_x: Tensor  # [D, 3H]
    w_h: Tensor  # [H, 3H]
    b: Tensor    # [3H]

    @property
    def hidden(self) -> int:
        return self.w_h.shape[0]

    @property
    def input_dim(self) -> int:
        return self.w_x.shape[0]


def gru_forward(seq, params: GruParams, h0: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Run the GRU over the last axis; returns (outputs [.., H, T], final [.., H])."""
    x, squeeze = _promote_seq(as_tensor(seq), "gru_forward")
    n, d, t = x.shape
    h_dim = params.hidden
    if params.input_dim != d:
        raise ShapeError(
            f"gru input dim mismatch: sequence axis 1 has {d}, w_x axis 0 has {params.input_dim}"
        )
    if params.w_x.shape != (d, 3 * h_dim) or params.w_h.shape != (h_dim, 3 * h_dim) \
            or params.b.shape != (3 * h_dim,):
        raise ShapeError(
            f"gru weight shapes inconsistent: w_x {params.w_x.shape}, "
            f"w_h {params.w_h.shape}, b {params.b.shape}"
        )
    if h0 is None:
        h = Tensor(np.zeros((1, h_dim)))
    else:
        h = reshape(h0, (1, h_dim)) if h0.ndim == 1 else h0

    cols_r = (slice(None), slice(0, h_dim))
    cols_z = (slice(None), slice(h_dim, 2 * h_dim))
    cols_c = (slice(None), slice(2 * h_dim, 3 * h_dim))
    steps: list[Tensor] = []
    for step in range(t):
        x_t = index(x, (slice(None), slice(None), step))
        gx = add(matmul(x_t, params.w_x), params.b)
        gh = matmul(h, params.w_h)
        r = sigmoid(add(index(gx, cols_r), index(gh, cols_r)))
        z = sigmoid(add(index(gx, cols_z), index(gh, cols_z)))
        cand = tanh(add(index(gx, cols_c), mul(r, index(gh, cols_c))))
        h = add(mul(sub(1.0, z), cand), mul(z, h))
        steps.append(h)
    outputs = stack(steps, axis=2)
    if squeeze:
        return reshape(outputs, (h_dim, t)), reshape(h, (h_dim,))
    return outputs, h


def _check_unit_rows(data: Array, name: str, tol: float = 1e-6) -> None:
    norms = np.linalg.norm(data, axis=1)
    dev = np.abs(norms - 1.0)
    if np.any(dev > tol):
        bad = int(np.argmax(dev))
        raise ContractViolationError(
            f"{name} row {bad} has norm {norms[bad]:.8f}; expected unit-norm rows"
        )


def logsumexp_rows(logits: Tensor) -> Tensor:
    """Row-wise log-sum-exp with detached max subtraction, shape [n]."""
    m = Tensor(logits.data.max(axis=1, keepdims=True))
    shifted = exp(sub(logits, m))
    lse = add(log(tsum(shifted, axis=1, keepdims=True)), m)
    return reshape(lse, (logits.shape[0],))


def info_nce(anchors: Tensor, targets: Tensor, log_tau: Tensor) -> Tensor:
    """Batch-averaged InfoNCE with positional positives.

    `loss = (1/n) sum_i -log softmax_j(a_i . t_j / tau)[i]` where
    `tau = exp(log_tau)`. Row `i` of `targets` is the positive for row `i`
    of `anchors`; every other target row is a negative. Both matrices must
    arrive unit-normalized so the dot products are cosine similarities.
    """
    if anchors.ndim != 2 or targets.ndim != 2 or anchors.shape != targets.shape:
        raise ShapeError(
            f"info_nce expects matching [n, d] operands, got {anchors.shape} and {targets.shape}"
        )
    n = anchors.shape[0]
    if n == 0:
        raise EmptyBatchError("info_nce needs at least one anchor/target pair")
    if log_tau.size != 1:
        raise ShapeError(f"log_tau must be scalar, got shape {log_tau.shape}")
    _check_unit_rows(anchors.data, "anchors")
    _check_unit_rows(targets.data, "targets")

    inv_tau = exp(neg(log_tau))
    logits = mul(matmul(anchors, transpose(targets)), inv_tau)
    lse = logsumexp_rows(logits)
    idx = np.arange(n)
    positives = index(logits, (idx, idx))
    return scale(tsum(sub(lse, positives)), 1.0 / n)


def cross_entropy(logits: Tensor, labels: Array) -> Tensor:
    """Mean softmax cross-entropy against integer labels."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [n, k] logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.intp)
    n = logits.shape[0]
    if labels.shape != (n,):
        raise ShapeError(f"labels must be [{n}], got {labels.shape}")
    lse = logsumexp_rows(logits)
    picked = index(logits, (np.arange(n), labels))
    return scale(tsum(sub(lse, picked)), 1.0 / n)
