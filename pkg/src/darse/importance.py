"""Importance-proportional rank allocation and regularized low-rank fitting.

Three steps: score each frozen layer matrix by its singular energy, split a
total rank budget in proportion to those scores, then fit ``W0 + U V^T`` to a
target by gradient descent with an L2 penalty on the factors.

The fitting loss is the squared Frobenius residual against an explicit target
matrix. It stands in for a task loss, which this library does not model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .errors import (
    DegenerateInputError,
    InvalidInputError,
    InvalidRankError,
    NumericFailureError,
)
from .lowrank import LowRankFactors, as_matrix, singular_values

# a quotient this close below an integer is snapped up, so that rescaling all
# importances by a constant cannot flip a floor through rounding noise
_FLOOR_SLACK = 1e-9


def importance_score(m) -> float:
    """Sum of squared singular values of ``m`` (its squared Frobenius norm)."""
    s = singular_values(m)
    return math.fsum(float(x) * float(x) for x in s)


def importance_vector(matrices) -> list[float]:
    return [importance_score(m) for m in matrices]


def allocate_ranks(
    importances: Sequence[float],
    rank_budget: int,
    caps: Optional[Sequence[int]] = None,
) -> list[int]:
    """Split ``rank_budget`` as ``floor(I_i / sum(I) * budget)``, then clamp.

    ``caps`` gives the per-layer upper bound (typically ``min(m_i, n_i)``);
    with ``caps=None`` the raw floors are returned, whose sum never exceeds
    the budget.
    """
    if len(importances) == 0:
        raise InvalidInputError("no importances to allocate over")
    if caps is not None and len(caps) != len(importances):
        raise InvalidInputError(
            f"{len(caps)} caps given for {len(importances)} layers"
        )
    if rank_budget < 1:
        raise InvalidInputError(f"rank budget must be positive, got {rank_budget}")
    for x in importances:
        if not math.isfinite(x) or x < 0:
            raise InvalidInputError(f"importance scores must be finite and >= 0, got {x}")
    if all(x == 0 for x in importances):
        raise DegenerateInputError("all importance scores are zero; no proportional split exists")

    exact = [Fraction(x) for x in importances]
    total = sum(exact)
    ranks = []
    for x in exact:
        share = x * rank_budget / total
        r = math.floor(share)
        if share - r > 1 - _FLOOR_SLACK:
            r += 1
        ranks.append(r)

    if caps is not None:
        ranks = [min(max(r, 0), int(c)) for r, c in zip(ranks, caps)]
    return ranks


@dataclass(frozen=True)
class FitConfig:
    reg_strength: float = 0.0
    step_size: float = 0.05
    max_steps: int = 2000
    stop_tolerance: float = 1e-12

    def __post_init__(self):
        if self.reg_strength < 0:
            raise InvalidInputError("reg_strength must be >= 0")
        if not self.step_size > 0:
            raise InvalidInputError("step_size must be > 0")
        if self.max_steps < 1:
            raise InvalidInputError("max_steps must be >= 1")
        if self.stop_tolerance < 0:
            raise InvalidInputError("stop_tolerance must be >= 0")


def fit_objective(base, target, u, v, reg_strength: float) -> float:
    """``||W0 + U V^T - T||_F^2 + lam * (||U||_F^2 + ||V||_F^2)``."""
    e = base + u @ v.T - target
    return float(np.sum(e * e) + reg_strength * (np.sum(u * u) + np.sum(v * v)))


def fit_gradients(base, target, u, v, reg_strength: float):
    """Analytic gradients ``(dL/dU, dL/dV)`` of :func:`fit_objective`."""
    e = base + u @ v.T - target
    return 2.0 * e @ v + 2.0 * reg_strength * u, 2.0 * e.T @ u + 2.0 * reg_strength * v


def fit_low_rank(base, target, r: int, cfg: FitConfig = FitConfig(), seed: int = 0):
    """Fit rank-``r`` factors over a frozen base by monotone gradient descent.

    Factors start i.i.d. uniform in [-0.01, 0.01]. A step that would raise the
    objective is retried at half the step size (up to 50 halvings); after an
    accepted step the step size recovers toward ``cfg.step_size``. The run ends
    when an accepted step lowers the objective by less than
    ``cfg.stop_tolerance``, when no decreasing step can be found, or after
    ``cfg.max_steps`` accepted steps.

    Returns ``(factors, final_loss)``.
    """
    w0 = as_matrix(base, "base")
    t = as_matrix(target, "target")
    if w0.shape != t.shape:
        raise InvalidInputError(f"base shape {w0.shape} does not match target {t.shape}")
    m, n = w0.shape
    if not (0 <= r <= min(m, n)):
        raise InvalidRankError(f"rank {r} outside [0, {min(m, n)}]")
    lam = cfg.reg_strength
    if r == 0:
        return LowRankFactors.zero(m, n), fit_objective(w0, t, np.zeros((m, 0)), np.zeros((n, 0)), lam)

    rng = np.random.default_rng(seed)
    u = rng.uniform(-0.01, 0.01, size=(m, r))
    v = rng.uniform(-0.01, 0.01, size=(n, r))
    loss = fit_objective(w0, t, u, v, lam)
    step = cfg.step_size

    for k in range(cfg.max_steps):
        gu, gv = fit_gradients(w0, t, u, v, lam)
        for _ in range(50):
            u_new = u - step * gu
            v_new = v - step * gv
            new_loss = fit_objective(w0, t, u_new, v_new, lam)
            if not math.isfinite(new_loss):
                if step < 1e-300:
                    raise NumericFailureError(f"fit diverged at step {k}: loss is {new_loss}")
                step *= 0.5
                continue
            if new_loss <= loss:
                break
            step *= 0.5
        else:
            break
        decrease = loss - new_loss
        u, v, loss = u_new, v_new, new_loss
        if decrease < cfg.stop_tolerance:
            break
        step = min(cfg.step_size, 2.0 * step)

    if not math.isfinite(loss):
        raise NumericFailureError(f"fit diverged at step {k}: loss is {loss}")
    return LowRankFactors(u, v), loss
