"""Two-task gradient balancing.

The preservation loss is scaled by round^lambda, then the learn and keep
gradients are combined with the closed-form coefficient gamma that minimizes
the norm of the convex combination gamma * learn + (1 - gamma) * keep. The
piecewise branches below are exactly the [0, 1] clamp of the unconstrained
minimizer, evaluated in a fixed order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import LossValue
from .mathcore import Array


@dataclass(frozen=True)
class BalanceResult:
    gamma: float
    combined: Array
    dot_ll: float
    dot_lk: float
    dot_kk: float
    replay_value: float | None = None


def scale_keep(ca: LossValue, round_k: int, lam: float) -> LossValue:
    """Scale the preservation loss (value and gradient) by round_k**lam."""
    if round_k < 1:
        raise ValueError(f"round index must be >= 1, got {round_k}")
    return ca.scaled(float(round_k) ** lam)


def compute_gamma(learn_grad: Array, keep_grad: Array) -> BalanceResult:
    """Closed-form min-norm coefficient for two task gradients.

    Branch order: gamma = 1 when learn.keep >= learn.learn, else gamma = 0
    when learn.keep >= keep.keep, else the interior stationary point
    (keep - learn).keep / |learn - keep|^2. Two zero gradients degenerate to
    gamma = 0.5 with a zero combined step.
    """
    learn_grad = np.asarray(learn_grad, dtype=np.float64)
    keep_grad = np.asarray(keep_grad, dtype=np.float64)
    if learn_grad.shape != keep_grad.shape:
        raise ValueError(
            f"gradient dims differ: {learn_grad.shape} vs {keep_grad.shape}"
        )
    dot_ll = float(learn_grad @ learn_grad)
    dot_lk = float(learn_grad @ keep_grad)
    dot_kk = float(keep_grad @ keep_grad)
    if not (np.isfinite(dot_ll) and np.isfinite(dot_lk) and np.isfinite(dot_kk)):
        raise FloatingPointError("non-finite gradient dot products")

    if dot_ll == 0.0 and dot_kk == 0.0:
        gamma = 0.5
    elif dot_lk >= dot_ll:
        gamma = 1.0
    elif dot_lk >= dot_kk:
        gamma = 0.0
    else:
        gamma = (dot_kk - dot_lk) / (dot_ll - 2.0 * dot_lk + dot_kk)
    combined = gamma * learn_grad + (1.0 - gamma) * keep_grad
    return BalanceResult(gamma, combined, dot_ll, dot_lk, dot_kk)


def replay_gradient(learn: LossValue, keep: LossValue) -> BalanceResult:
    """Balance the learn and keep losses into the replay update direction.

    The returned ``replay_value`` is gamma * learn + (1 - gamma) * keep, for
    logging only; the optimizer consumes ``combined``.
    """
    res = compute_gamma(learn.grad, keep.grad)
    value = res.gamma * learn.value + (1.0 - res.gamma) * keep.value
    return BalanceResult(
        res.gamma, res.combined, res.dot_ll, res.dot_lk, res.dot_kk, value
    )
