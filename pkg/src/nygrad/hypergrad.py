"""Assembly of the approximate hypergradient from an IHVP backend.

The implicit-function hypergradient of an outer objective g under an inner
objective f is

    dg/dphi = -(d^2 f / dphi dtheta)^T (d^2 f / dtheta^2 + rho I)^-1 dg/dtheta
              + dg/dphi,

with all derivative access mediated by :class:`DerivativeBundle`. The
inverse-Hessian-vector product is the configurable bottleneck: low-rank
(Nystrom), truncated CG, or truncated Neumann. One shared rho regularizes
every backend, so they all invert the same operator.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from .errors import BackendError, NygradError
from .iterative import CgConfig, NeumannConfig, cg_solve, neumann_apply
from .linop import (
    DenseOperator,
    HvpOracle,
    counting_oracle,
    dense_regularized_inverse_apply,
    operator_norm,
)
from .nystrom import (
    EIG_FLOOR_DEFAULT,
    InverseApplyPlan,
    SamplingStrategy,
    DIAG_SQUARED,
    build_factors,
    inverse_apply,
    nystrom_error_opnorm,
    sample_indices,
    theorem1_bound,
)


@dataclass(frozen=True)
class DerivativeBundle:
    """Analytic derivative oracles of one bilevel problem at a point.

    grad_outer_theta  (p,)  dg/dtheta
    grad_outer_phi    (h,)  dg/dphi
    hvp               product oracle for d^2 f / dtheta^2
    mixed_apply_transpose   v (p,) -> (d^2 f / dphi dtheta)^T v  (h,)
    hvp_diag          optional analytic operator diagonal, needed only by
                      diagonal-squared column sampling
    """

    grad_outer_theta: np.ndarray
    grad_outer_phi: np.ndarray
    hvp: HvpOracle
    mixed_apply_transpose: Callable[[np.ndarray], np.ndarray]
    hvp_diag: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(
            self, "grad_outer_theta", np.asarray(self.grad_outer_theta, dtype=np.float64)
        )
        object.__setattr__(
            self, "grad_outer_phi", np.asarray(self.grad_outer_phi, dtype=np.float64)
        )
        if self.grad_outer_theta.shape != (self.hvp.dim,):
            raise ValueError(
                f"dg/dtheta has shape {self.grad_outer_theta.shape}, expected "
                f"({self.hvp.dim},)"
            )

    @property
    def p(self) -> int:
        return self.hvp.dim

    @property
    def h(self) -> int:
        return self.grad_outer_phi.shape[0]


@dataclass(frozen=True)
class NystromIhvp:
    """Low-rank backend: sample k columns, invert via Woodbury.

    ``kappa`` selects the evaluation order: None or k for the one-shot
    solve, 1 for rank-1 streaming, anything between for chunked streaming.
    """

    k: int
    rho: float
    kappa: int | None = None
    strategy: SamplingStrategy = SamplingStrategy()
    eig_floor: float = EIG_FLOOR_DEFAULT

    backend = "nystrom"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.rho <= 0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        if self.kappa is not None and not 1 <= self.kappa <= self.k:
            raise ValueError(f"kappa must lie in [1, {self.k}], got {self.kappa}")

    def plan(self) -> InverseApplyPlan:
        if self.kappa is None or self.kappa == self.k:
            return InverseApplyPlan.full()
        if self.kappa == 1:
            return InverseApplyPlan.rank1()
        return InverseApplyPlan.chunked(self.kappa)

    def label(self) -> str:
        return f"nystrom(k={self.k}, rho={self.rho:g})"


@dataclass(frozen=True)
class CgIhvp:
    """Truncated-CG backend; takes no step size."""

    cg: CgConfig
    rho: float

    backend = "cg"

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError(f"rho must be positive, got {self.rho}")

    def label(self) -> str:
        return f"cg(l={self.cg.max_iters}, rho={self.rho:g})"


@dataclass(frozen=True)
class NeumannIhvp:
    """Truncated Neumann-series backend."""

    neumann: NeumannConfig
    rho: float

    backend = "neumann"

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError(f"rho must be positive, got {self.rho}")

    def label(self) -> str:
        return f"neumann(l={self.neumann.truncation}, alpha={self.neumann.alpha:g}, rho={self.rho:g})"


IhvpConfig = Union[NystromIhvp, CgIhvp, NeumannIhvp]


def ihvp_to_dict(cfg: IhvpConfig) -> dict:
    if isinstance(cfg, NystromIhvp):
        return {
            "backend": "nystrom",
            "k": cfg.k,
            "rho": cfg.rho,
            "kappa": cfg.kappa,
            "sampling": cfg.strategy.kind,
            "sampling_seed": cfg.strategy.seed,
            "eig_floor": cfg.eig_floor,
        }
    if isinstance(cfg, CgIhvp):
        return {
            "backend": "cg",
            "max_iters": cfg.cg.max_iters,
            "residual_tol": cfg.cg.residual_tol,
            "rho": cfg.rho,
        }
    if isinstance(cfg, NeumannIhvp):
        return {
            "backend": "neumann",
            "truncation": cfg.neumann.truncation,
            "alpha": cfg.neumann.alpha,
            "rho": cfg.rho,
        }
    raise TypeError(f"unknown IHVP config type {type(cfg).__name__}")


def ihvp_from_dict(d: dict) -> IhvpConfig:
    d = dict(d)
    backend = d.pop("backend", None)
    try:
        if backend == "nystrom":
            strategy = SamplingStrategy(
                kind=d.pop("sampling", "uniform"), seed=d.pop("sampling_seed", 0)
            )
            return NystromIhvp(strategy=strategy, **d)
        if backend == "cg":
            rho = d.pop("rho")
            return CgIhvp(CgConfig(**d), rho)
        if backend == "neumann":
            rho = d.pop("rho")
            return NeumannIhvp(NeumannConfig(**d), rho)
    except TypeError as exc:
        raise ValueError(f"bad {backend!r} backend fields: {exc}") from exc
    raise ValueError(f"unknown IHVP backend {backend!r}")


@dataclass
class RunDiagnostics:
    """What one hypergradient computation cost and how the backend behaved."""

    backend: str
    oracle_calls: int
    wall_time_s: float
    info: dict[str, float] = field(default_factory=dict)


def _nystrom_sample(bundle: DerivativeBundle, cfg: NystromIhvp):
    diag = None
    if cfg.strategy.kind == DIAG_SQUARED:
        if bundle.hvp_diag is None:
            raise ValueError(
                "diag-squared sampling needs bundle.hvp_diag (the analytic "
                "operator diagonal); none was provided"
            )
        diag = bundle.hvp_diag
    return sample_indices(bundle.p, cfg.k, cfg.strategy, diag)


def _ihvp(bundle: DerivativeBundle, cfg: IhvpConfig, op: HvpOracle):
    """Apply the configured approximate (H + rho I)^-1 to dg/dtheta."""
    g = bundle.grad_outer_theta
    info: dict[str, float] = {}
    if isinstance(cfg, NystromIhvp):
        sampled = _nystrom_sample(bundle, cfg)
        factors = build_factors(op, sampled, cfg.rho, cfg.eig_floor)
        v = inverse_apply(factors, cfg.plan(), g)
        info["dropped_eigvals"] = float(factors.n_dropped)
        info["negative_eigvals"] = float(factors.n_negative_retained)
        info["uniform_fallback"] = float(sampled.uniform_fallback)
    elif isinstance(cfg, CgIhvp):
        v, iters, residual = cg_solve(op, cfg.rho, g, cfg.cg)
        info["cg_iters"] = float(iters)
        info["cg_residual"] = residual
    elif isinstance(cfg, NeumannIhvp):
        v = neumann_apply(op, cfg.rho, g, cfg.neumann)
    else:
        raise TypeError(f"unknown IHVP config type {type(cfg).__name__}")
    return v, info


def hypergradient(bundle: DerivativeBundle, cfg: IhvpConfig) -> tuple[np.ndarray, RunDiagnostics]:
    """Approximate dg/dphi through the configured IHVP backend.

    The IHVP is applied to the vector dg/dtheta first and only then pushed
    through the mixed partial, so the p x h block is never formed.
    Backend failures re-raise as :class:`BackendError` with the tag attached.
    """
    op, counter = counting_oracle(bundle.hvp)
    start = time.perf_counter()
    try:
        v, info = _ihvp(bundle, cfg, op)
    except NygradError as exc:
        raise BackendError(cfg.backend, exc) from exc
    h = -np.asarray(bundle.mixed_apply_transpose(v), dtype=np.float64) + bundle.grad_outer_phi
    wall = time.perf_counter() - start
    return h, RunDiagnostics(cfg.backend, counter.calls, wall, info)


def dense_hypergradient(
    bundle: DerivativeBundle, dense_h: DenseOperator, rho: float
) -> np.ndarray:
    """Reference hypergradient h* through the exact dense (H + rho I)^-1."""
    v = dense_regularized_inverse_apply(dense_h, rho, bundle.grad_outer_theta)
    return -np.asarray(bundle.mixed_apply_transpose(v), dtype=np.float64) + bundle.grad_outer_phi


def hypergradient_error(
    bundle: DerivativeBundle,
    cfg: NystromIhvp,
    dense_h: DenseOperator,
    dense_mixed: np.ndarray,
) -> tuple[float, float]:
    """Measured hypergradient error against the dense reference, and its
    a-priori accuracy bound.

    Needs the dense Hessian and the dense (p, h) mixed-partial block, so it
    only runs at desk scale. For positive semidefinite H the measured error
    does not exceed the bound (up to solver round-off).
    """
    if not isinstance(cfg, NystromIhvp):
        raise ValueError("the accuracy bound applies to the Nystrom backend only")
    dense_mixed = np.asarray(dense_mixed, dtype=np.float64)
    if dense_mixed.shape != (bundle.p, bundle.h):
        raise ValueError(
            f"mixed block has shape {dense_mixed.shape}, expected {(bundle.p, bundle.h)}"
        )
    h_approx, _ = hypergradient(bundle, cfg)
    h_star = dense_hypergradient(bundle, dense_h, cfg.rho)
    err = float(np.linalg.norm(h_star - h_approx))

    op, _ = counting_oracle(bundle.hvp)
    sampled = _nystrom_sample(bundle, cfg)  # same seed, same indices
    factors = build_factors(op, sampled, cfg.rho, cfg.eig_floor)
    err_op = nystrom_error_opnorm(dense_h, factors)
    bound = theorem1_bound(
        float(np.linalg.norm(bundle.grad_outer_theta)),
        operator_norm(dense_mixed),
        cfg.rho,
        err_op,
    )
    return err, bound
