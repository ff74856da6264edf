"""Adam optimizer and a central-finite-difference gradient checker."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError, TrainingDivergenceError
from .tensor import Array, Tape, Tensor


@dataclass
class AdamState:
    """First/second-moment accumulators, aligned index-wise with the params."""

    lr: float
    m: list[Array]
    v: list[Array]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: Sequence[Tensor], lr: float, beta1: float = 0.9,
             beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(
            lr=lr,
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def adam_step(params: Sequence[Tensor], grads: Sequence[Array | None],
              state: AdamState) -> None:
    """One bias-corrected Adam update, applied in place.

    A `None` gradient is treated as zeros (the parameter's moments decay
    but, starting from zero moments, its value is untouched). Any non-finite
    gradient aborts before mutating parameters or state.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError(
            f"adam_step arity mismatch: {len(params)} params, {len(grads)} grads, "
            f"{len(state.m)} state slots"
        )
    for p, g in zip(params, grads):
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError("non-finite gradient encountered; step aborted")

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** state.step
    corr2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        m_hat = state.m[i] / corr1
        v_hat = state.v[i] / corr2
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def grad_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
               eps: float = 1e-5) -> float:
    """Worst relative error between analytic and central-difference gradients.

    `loss_fn` must be deterministic (any internal randomness re-seeded per
    call). The relative error denominator is floored at 1e-8 so exact zeros
    on both sides compare clean. Reports; never raises on mismatch.
    """
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
        tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = loss_fn().item()
            flat[i] = orig - eps
            f_minus = loss_fn().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            denom = max(abs(numeric), abs(ana_flat[i]), 1e-8)
            worst = max(worst, abs(numeric - ana_flat[i]) / denom)
    return worst
