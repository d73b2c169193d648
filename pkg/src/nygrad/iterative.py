"""Truncated conjugate-gradient and Neumann-series IHVP baselines.

Both solve (H + rho I) x = b approximately through the product oracle, cut
off after a fixed number of iterations l. They are the standard iterative
alternatives the low-rank path is compared against: one oracle product per
iteration, O(p) workspace, accuracy controlled solely by l.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DivergenceError
from .linop import HvpOracle, _as_vector
from .workspace import note_workspace


@dataclass(frozen=True)
class CgConfig:
    """Truncated CG: at most ``max_iters`` steps; ``residual_tol`` of 0
    disables early stopping so the truncation count is the sole knob."""

    max_iters: int
    residual_tol: float = 0.0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.residual_tol < 0:
            raise ValueError(f"residual_tol must be >= 0, got {self.residual_tol}")


@dataclass(frozen=True)
class NeumannConfig:
    """Truncated Neumann series with step size alpha.

    Converges only when ||alpha (H + rho I)|| <= 1; that is the caller's
    burden. Divergence is detected, not prevented.
    """

    truncation: int
    alpha: float

    def __post_init__(self):
        if self.truncation < 1:
            raise ValueError(f"truncation must be >= 1, got {self.truncation}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")


class CgResult(NamedTuple):
    x: np.ndarray
    iters_used: int
    final_residual: float


def cg_solve(op: HvpOracle, rho: float, b, cfg: CgConfig) -> CgResult:
    """Standard conjugate gradient on A = H + rho I from a zero start.

    Stops after ``cfg.max_iters`` iterations or once the residual drops to
    ``residual_tol * ||b||``. Uses exactly ``iters_used`` oracle products.
    Raises :class:`DivergenceError` (carrying the last finite iterate) if
    an indefinite A drives the recurrence non-finite.
    """
    if rho < 0:
        raise ValueError(f"rho must be nonnegative, got {rho}")
    b = _as_vector(b, op.dim)
    x = np.zeros(op.dim)
    r = b.copy()
    note_workspace(x, "cg/x")
    note_workspace(r, "cg/r")
    threshold = cfg.residual_tol * float(np.linalg.norm(b))
    rr = float(r @ r)
    residual = rr**0.5
    if residual <= threshold:
        return CgResult(x, 0, residual)
    p = r.copy()
    note_workspace(p, "cg/p")
    for it in range(1, cfg.max_iters + 1):
        ap = op.apply(p) + rho * p
        note_workspace(ap, "cg/Ap")
        p_ap = float(p @ ap)
        if p_ap == 0.0 or not np.isfinite(p_ap):
            raise DivergenceError(
                f"CG broke down at iteration {it} (curvature p.Ap = {p_ap}; A is "
                "likely indefinite)",
                last_iterate=x,
                step=it,
            )
        alpha = rr / p_ap
        x_prev = x
        x = x + alpha * p
        r = r - alpha * ap
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(r))):
            raise DivergenceError(
                f"CG broke down at iteration {it} (non-finite iterate; A is "
                "likely indefinite)",
                last_iterate=x_prev,
                step=it,
            )
        rr_new = float(r @ r)
        residual = rr_new**0.5
        if residual <= threshold:
            return CgResult(x, it, residual)
        p = r + (rr_new / rr) * p
        rr = rr_new
    return CgResult(x, cfg.max_iters, residual)


def neumann_apply(op: HvpOracle, rho: float, b, cfg: NeumannConfig) -> np.ndarray:
    """Truncated Neumann approximation of (H + rho I)^-1 b:

        alpha * sum_{i=0}^{l} (I - alpha A)^i b,   A = H + rho I,

    evaluated by the recurrence s <- b + (I - alpha A) s. Uses exactly l
    oracle products. Raises :class:`DivergenceError` once the partial sums
    turn non-finite or outgrow ||b|| by 1/eps, at which point the series
    has provably stopped carrying information (||alpha A|| > 1).
    """
    if rho < 0:
        raise ValueError(f"rho must be nonnegative, got {rho}")
    b = _as_vector(b, op.dim)
    b_scale = float(np.abs(b).max())
    if b_scale == 0.0:
        return np.zeros(op.dim)
    limit = b_scale / np.finfo(np.float64).eps
    s = b.copy()
    note_workspace(s, "neumann/s")
    for i in range(1, cfg.truncation + 1):
        a_s = op.apply(s) + rho * s
        note_workspace(a_s, "neumann/As")
        s = b + s - cfg.alpha * a_s
        if not np.all(np.isfinite(s)):
            raise DivergenceError(
                f"Neumann series produced non-finite values at term {i}", step=i
            )
        if float(np.abs(s).max()) > limit:
            raise DivergenceError(
                f"Neumann series diverging at term {i}: partial sums exceed "
                "||b||/eps, so ||alpha (H + rho I)|| > 1",
                step=i,
            )
    return cfg.alpha * s
