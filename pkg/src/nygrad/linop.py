"""Matrix-free symmetric linear operators and a dense reference backend.

Every solver in this package touches the Hessian only through
:class:`HvpOracle`, a product oracle ``v -> Hv``. :class:`DenseOperator`
wraps an explicit symmetric matrix for brute-force reference computations
(exact regularized solves, spectral norms) at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg

from .errors import CapabilityError, IllConditionedError

#: DenseOperator refuses matrices above this dimension unless the caller
#: raises the cap explicitly; brute-force checks are desk-scale by design.
DENSE_CAP_DEFAULT = 2000

_SYMMETRY_PROBE_PAIRS = 3
_SYMMETRY_PROBE_TOL = 1e-6
_DENSE_SOLVE_RESIDUAL_TOL = 1e-10


def _as_vector(b, dim: int) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (dim,):
        raise ValueError(f"expected a vector of shape ({dim},), got {b.shape}")
    return b


@dataclass(frozen=True)
class HvpOracle:
    """A symmetric operator of dimension ``dim`` accessed via products.

    ``apply`` must be linear, symmetric (u.(Hv) == v.(Hu)) and deterministic:
    repeated calls on equal input return bit-identical output, which makes
    oracles safe to share across concurrent callers.

    ``apply_block`` optionally maps a (dim, m) block to (H @ block) in one
    call; column extraction batches through it when present.

    A cheap randomized symmetry probe runs at construction (3 probe pairs,
    relative tolerance 1e-6). Pass ``check_symmetry=False`` to skip it, e.g.
    for oracles that are symmetric by construction.
    """

    dim: int
    apply: Callable[[np.ndarray], np.ndarray]
    apply_block: Callable[[np.ndarray], np.ndarray] | None = None
    check_symmetry: bool = True

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"operator dimension must be positive, got {self.dim}")
        if self.check_symmetry:
            self._probe_symmetry()

    def _probe_symmetry(self) -> None:
        rng = np.random.default_rng(0x5f3759df)
        for _ in range(_SYMMETRY_PROBE_PAIRS):
            u = rng.standard_normal(self.dim)
            v = rng.standard_normal(self.dim)
            uhv = float(u @ self.apply(v))
            vhu = float(v @ self.apply(u))
            scale = max(abs(uhv), abs(vhu), 1e-300)
            if abs(uhv - vhu) > _SYMMETRY_PROBE_TOL * scale:
                raise ValueError(
                    "oracle failed the symmetry probe: "
                    f"u.Hv={uhv:.6e} vs v.Hu={vhu:.6e}"
                )

    def apply_columns(self, block: np.ndarray) -> np.ndarray:
        """Apply the operator to each column of a (dim, m) block."""
        block = np.asarray(block, dtype=np.float64)
        if block.ndim != 2 or block.shape[0] != self.dim:
            raise ValueError(f"expected a ({self.dim}, m) block, got {block.shape}")
        if self.apply_block is not None:
            return self.apply_block(block)
        return np.column_stack([self.apply(block[:, j]) for j in range(block.shape[1])])


@dataclass
class CallCounter:
    """Mutable oracle-product counter; block applies count one per column."""

    calls: int = 0


def counting_oracle(op: HvpOracle) -> tuple[HvpOracle, CallCounter]:
    """Wrap ``op`` so every product is tallied. Returns (wrapper, counter)."""
    counter = CallCounter()

    def apply(v):
        counter.calls += 1
        return op.apply(v)

    def apply_block(block):
        counter.calls += block.shape[1]
        return op.apply_columns(block)

    wrapped = HvpOracle(op.dim, apply, apply_block, check_symmetry=False)
    return wrapped, counter


@dataclass(frozen=True)
class DenseOperator:
    """Explicit symmetric matrix backend for oracle and reference use.

    The constructor symmetrizes away floating-point asymmetry up to 1e-8
    relative and rejects anything worse. Dimension is capped (default
    ``DENSE_CAP_DEFAULT``) so brute-force checks stay desk-scale.
    """

    matrix: np.ndarray
    max_dim: int = field(default=DENSE_CAP_DEFAULT, compare=False)

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {m.shape}")
        if m.shape[0] > self.max_dim:
            raise CapabilityError(
                f"dense operator of dimension {m.shape[0]} exceeds the cap "
                f"{self.max_dim}; raise max_dim only if you accept the cost"
            )
        asym = np.abs(m - m.T).max()
        scale = max(np.abs(m).max(), 1e-300)
        if asym > 1e-8 * scale:
            raise ValueError(f"matrix is not symmetric: max |M - M.T| = {asym:.3e}")
        object.__setattr__(self, "matrix", (m + m.T) / 2.0)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def oracle(self) -> HvpOracle:
        """View this matrix as an HvpOracle (symmetric by construction)."""
        m = self.matrix
        return HvpOracle(
            dim=self.dim,
            apply=lambda v: m @ v,
            apply_block=lambda block: m @ block,
            check_symmetry=False,
        )


def hvp_column(op: HvpOracle, i: int) -> np.ndarray:
    """Extract column i of the operator as the product with basis vector e_i."""
    if not 0 <= i < op.dim:
        raise ValueError(f"column index {i} out of range [0, {op.dim})")
    e = np.zeros(op.dim)
    e[i] = 1.0
    return op.apply(e)


def dense_regularized_inverse_apply(m: DenseOperator, rho: float, b) -> np.ndarray:
    """Solve (M + rho I) x = b by dense LU with one refinement step.

    This is the brute-force reference for every approximate inverse in the
    package. Guarantees a residual below 1e-10 * ||b|| or raises
    :class:`IllConditionedError`.
    """
    if rho <= 0:
        raise ValueError(f"rho must be positive, got {rho}")
    b = _as_vector(b, m.dim)
    a = m.matrix + rho * np.eye(m.dim)
    try:
        lu, piv = scipy.linalg.lu_factor(a)
        x = scipy.linalg.lu_solve((lu, piv), b)
        # One iterative refinement pass tightens ill-conditioned solves.
        x = x + scipy.linalg.lu_solve((lu, piv), b - a @ x)
    except (scipy.linalg.LinAlgError, ValueError) as exc:
        raise IllConditionedError(f"dense factorization of M + rho I failed: {exc}") from exc
    residual = float(np.linalg.norm(a @ x - b))
    if not np.isfinite(residual) or residual > _DENSE_SOLVE_RESIDUAL_TOL * max(
        float(np.linalg.norm(b)), 1e-300
    ):
        raise IllConditionedError(
            f"M + rho I is numerically singular (residual {residual:.3e})"
        )
    return x


def operator_norm(m: DenseOperator | np.ndarray) -> float:
    """Spectral norm: largest |eigenvalue| of a symmetric (square) input,
    largest singular value of a rectangular input."""
    if isinstance(m, DenseOperator):
        a = m.matrix
    else:
        a = np.asarray(m, dtype=np.float64)
        if a.ndim != 2:
            raise ValueError(f"expected a 2-d array, got ndim={a.ndim}")
    try:
        if a.shape[0] == a.shape[1]:
            sym = (a + a.T) / 2.0
            return float(np.abs(scipy.linalg.eigvalsh(sym)).max())
        return float(scipy.linalg.svdvals(a).max())
    except (scipy.linalg.LinAlgError, np.linalg.LinAlgError) as exc:
        raise IllConditionedError(f"spectral decomposition did not converge: {exc}") from exc
