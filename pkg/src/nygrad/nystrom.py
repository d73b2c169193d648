"""Low-rank column-sampled approximation of a symmetric operator H and
Woodbury-based application of (H_k + rho I)^-1.

The approximation is H_k = C P^+ C^T, where C holds k sampled columns of H
and P is the k x k pivot block C[K, :]. With the pivot eigendecomposition
P = U diag(lam) U^T and L = C U, the regularized inverse admits

    (H_k + rho I)^-1 = I/rho - (1/rho^2) L (diag(lam) + L^T L / rho)^-1 L^T

computed either in one shot (``full``), by streaming rank-1 updates
(``rank1``), or by streaming width-kappa blocks (``chunked``). All three
agree to machine precision; they trade time against workspace.

Eigenvalues below ``eig_floor`` (relative to the largest magnitude) are
treated as zero in the pseudo-inverse and their directions are excluded
from every variant, so the variants always operate on the same retained
subspace. This generalizes the usual fix for exactly-zero Hessian columns.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
import scipy.linalg

from .errors import CapabilityError, DegeneratePivotError, IllConditionedError
from .linop import DENSE_CAP_DEFAULT, DenseOperator, HvpOracle, _as_vector, operator_norm
from .workspace import note_workspace

UNIFORM = "uniform"
DIAG_SQUARED = "diag-squared"

#: Default relative floor below which pivot eigenvalues are dropped.
EIG_FLOOR_DEFAULT = 1e-10


@dataclass(frozen=True)
class SamplingStrategy:
    """How the column index set K is drawn.

    ``uniform`` samples k distinct indices without replacement;
    ``diag-squared`` weights index i proportionally to diag_i^2 (requires
    the caller to supply the operator diagonal).
    """

    kind: Literal["uniform", "diag-squared"] = UNIFORM
    seed: int = 0

    def __post_init__(self):
        if self.kind not in (UNIFORM, DIAG_SQUARED):
            raise ValueError(f"unknown sampling kind {self.kind!r}")


@dataclass(frozen=True)
class SampledIndices:
    """Result of index sampling. ``uniform_fallback`` flags that a weighted
    draw degenerated to uniform because every weight was zero."""

    indices: np.ndarray
    uniform_fallback: bool = False


def sample_indices(
    p: int,
    k: int,
    strategy: SamplingStrategy,
    diag: np.ndarray | None = None,
) -> SampledIndices:
    """Draw k distinct column indices from [0, p) under ``strategy``.

    The draw is fully determined by (strategy, seed, p, k, diag): repeat
    calls return identical index sets.
    """
    if not 1 <= k <= p:
        raise ValueError(f"need 1 <= k <= p, got k={k}, p={p}")
    rng = np.random.default_rng(strategy.seed)
    if strategy.kind == UNIFORM:
        return SampledIndices(rng.choice(p, size=k, replace=False))

    if diag is None:
        raise ValueError("diag-squared sampling requires the operator diagonal")
    diag = _as_vector(diag, p)
    if not np.all(np.isfinite(diag)):
        raise ValueError("operator diagonal contains non-finite entries")
    weights = diag * diag
    total = float(weights.sum())
    if total == 0.0:
        return SampledIndices(rng.choice(p, size=k, replace=False), uniform_fallback=True)
    n_nonzero = int(np.count_nonzero(weights))
    if k <= n_nonzero:
        idx = rng.choice(p, size=k, replace=False, p=weights / total)
        return SampledIndices(idx)
    # More indices requested than positive weights: take every weighted
    # index, then fill uniformly from the zero-weight leftovers.
    head = rng.choice(p, size=n_nonzero, replace=False, p=weights / total)
    leftovers = np.setdiff1d(np.arange(p), head)
    tail = rng.choice(leftovers, size=k - n_nonzero, replace=False)
    return SampledIndices(np.concatenate([head, tail]))


@dataclass(frozen=True)
class NystromFactors:
    """Sampled columns plus pivot eigendecomposition; represents
    (H_k + rho I)^-1 implicitly.

    ``dropped[i]`` marks pivot eigenvalues treated as zero in the
    pseudo-inverse; the corresponding directions are excluded from all
    inverse-apply variants.
    """

    indices: np.ndarray      # (k,) distinct column indices
    columns: np.ndarray      # (p, k) block C = H[:, K]
    pivot_eigvecs: np.ndarray  # (k, k) orthogonal U
    pivot_eigvals: np.ndarray  # (k,) lam, H[K, K] = U diag(lam) U^T
    rho: float
    dropped: np.ndarray      # (k,) bool

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        p, k = self.columns.shape
        if self.indices.shape != (k,) or self.pivot_eigvals.shape != (k,):
            raise ValueError("factor shapes are inconsistent")
        if self.pivot_eigvecs.shape != (k, k) or self.dropped.shape != (k,):
            raise ValueError("factor shapes are inconsistent")
        if len(np.unique(self.indices)) != k:
            raise ValueError("sampled indices must be distinct")
        if np.any(self.indices < 0) or np.any(self.indices >= p):
            raise ValueError("sampled indices out of range")

    @property
    def p(self) -> int:
        return self.columns.shape[0]

    @property
    def k(self) -> int:
        return self.columns.shape[1]

    @property
    def retained(self) -> np.ndarray:
        """Positions (into the eigendecomposition) that survived the floor."""
        return np.flatnonzero(~self.dropped)

    @property
    def n_dropped(self) -> int:
        return int(self.dropped.sum())

    @property
    def n_negative_retained(self) -> int:
        """Retained negative pivot eigenvalues (indefinite Hessian marker)."""
        return int(np.sum(self.pivot_eigvals[self.retained] < 0.0))

    def reconstruct_dense(self, max_dim: int = DENSE_CAP_DEFAULT) -> np.ndarray:
        """Materialize H_k = C P^+ C^T as a dense (p, p) array."""
        if self.p > max_dim:
            raise CapabilityError(
                f"refusing to materialize a {self.p} x {self.p} array (cap {max_dim})"
            )
        ridx = self.retained
        if ridx.size == 0:
            return np.zeros((self.p, self.p))
        ell = self.columns @ self.pivot_eigvecs[:, ridx]
        hk = (ell / self.pivot_eigvals[ridx]) @ ell.T
        return (hk + hk.T) / 2.0


def build_factors(
    op: HvpOracle,
    indices: np.ndarray | SampledIndices,
    rho: float,
    eig_floor: float = EIG_FLOOR_DEFAULT,
    allow_degenerate: bool = False,
) -> NystromFactors:
    """Extract k operator columns and eigendecompose the pivot block.

    Eigenvalues with |lam| < eig_floor * max|lam| (and exact zeros) are
    recorded as dropped. If everything is dropped the pivot carries no
    invertible subspace and a :class:`DegeneratePivotError` is raised
    unless ``allow_degenerate`` permits the (rho I)^-1-only factors.
    """
    if isinstance(indices, SampledIndices):
        indices = indices.indices
    indices = np.asarray(indices, dtype=np.int64)
    if indices.ndim != 1 or indices.size < 1:
        raise ValueError("indices must be a non-empty 1-d integer array")
    if len(np.unique(indices)) != indices.size:
        raise ValueError("indices must be distinct")
    if np.any(indices < 0) or np.any(indices >= op.dim):
        raise ValueError(f"indices out of range [0, {op.dim})")
    if rho <= 0:
        raise ValueError(f"rho must be positive, got {rho}")
    if eig_floor < 0:
        raise ValueError(f"eig_floor must be nonnegative, got {eig_floor}")

    basis = np.zeros((op.dim, indices.size))
    basis[indices, np.arange(indices.size)] = 1.0
    columns = op.apply_columns(basis)

    pivot = columns[indices, :]
    pivot = (pivot + pivot.T) / 2.0  # scrub floating-point asymmetry
    eigvals, eigvecs = np.linalg.eigh(pivot)
    max_abs = float(np.abs(eigvals).max())
    dropped = (np.abs(eigvals) < eig_floor * max_abs) | (eigvals == 0.0)
    if dropped.all() and not allow_degenerate:
        raise DegeneratePivotError(
            f"all {indices.size} pivot eigenvalues fell below the floor "
            f"({eig_floor:g} relative); reduce k or increase rho"
        )
    return NystromFactors(
        indices=indices,
        columns=columns,
        pivot_eigvecs=eigvecs,
        pivot_eigvals=eigvals,
        rho=rho,
        dropped=dropped,
    )


@dataclass(frozen=True)
class InverseApplyPlan:
    """Which Woodbury evaluation order to use and at what chunk width.

    ``full`` solves one k x k system (kappa = k), ``rank1`` streams
    single-column updates (kappa = 1), ``chunked`` streams width-kappa
    blocks. Identical output, different time/workspace balance.
    """

    variant: Literal["full", "rank1", "chunked"]
    kappa: int | None = None

    def __post_init__(self):
        if self.variant not in ("full", "rank1", "chunked"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant == "chunked":
            if self.kappa is None or self.kappa < 1:
                raise ValueError("chunked plan needs kappa >= 1")
        elif self.kappa is not None:
            raise ValueError(f"variant {self.variant!r} does not take kappa")

    @classmethod
    def full(cls) -> "InverseApplyPlan":
        return cls("full")

    @classmethod
    def rank1(cls) -> "InverseApplyPlan":
        return cls("rank1")

    @classmethod
    def chunked(cls, kappa: int) -> "InverseApplyPlan":
        return cls("chunked", kappa)

    def resolve_kappa(self, k: int) -> int:
        if self.variant == "full":
            return k
        if self.variant == "rank1":
            return 1
        if self.kappa > k:
            raise ValueError(f"chunk width {self.kappa} exceeds k={k}")
        return self.kappa


def _solve_symmetric(mat: np.ndarray, rhs: np.ndarray, context: str) -> np.ndarray:
    """LU solve of a small symmetric system with explicit singularity check."""
    try:
        lu, piv = scipy.linalg.lu_factor(mat)
    except (scipy.linalg.LinAlgError, ValueError) as exc:
        raise IllConditionedError(f"{context}: factorization failed ({exc})") from exc
    diag = np.abs(np.diag(lu))
    if diag.min() == 0.0 or not np.all(np.isfinite(diag)):
        raise IllConditionedError(f"{context}: system is numerically singular")
    out = scipy.linalg.lu_solve((lu, piv), rhs)
    if not np.all(np.isfinite(out)):
        raise IllConditionedError(f"{context}: solve produced non-finite values")
    return out


def _full_apply(factors: NystromFactors, b: np.ndarray) -> np.ndarray:
    rho = factors.rho
    ridx = factors.retained
    ell = factors.columns @ factors.pivot_eigvecs[:, ridx]  # (p, r)
    note_workspace(ell, "full/L")
    mat = np.diag(factors.pivot_eigvals[ridx]) + (ell.T @ ell) / rho
    mat = (mat + mat.T) / 2.0
    note_workspace(mat, "full/system")
    y = _solve_symmetric(mat, ell.T @ b, f"full inverse ({ridx.size} x {ridx.size} system)")
    return b / rho - (ell @ y) / rho**2


def _streamed_apply(factors: NystromFactors, kappa: int, b: np.ndarray) -> np.ndarray:
    """Woodbury recurrence over width-kappa blocks of the retained columns.

    Maintains the running inverse as I/rho minus a sum of low-rank
    corrections (W_j, M_j^-1) instead of a materialized p x p array; the
    recurrence itself is unchanged.
    """
    rho = factors.rho
    ridx = factors.retained
    corrections: list[tuple[np.ndarray, tuple]] = []

    def apply_running(block):
        out = block / rho
        for w, lu in corrections:
            out = out - w @ scipy.linalg.lu_solve(lu, w.T @ block)
        return out

    for chunk_no, start in enumerate(range(0, ridx.size, kappa)):
        cols = ridx[start : start + kappa]
        ell = factors.columns @ factors.pivot_eigvecs[:, cols]  # (p, kc) scratch
        note_workspace(ell, "stream/chunk_columns")
        w = apply_running(ell)
        note_workspace(w, "stream/chunk_applied")
        mat = np.diag(factors.pivot_eigvals[cols]) + ell.T @ w
        mat = (mat + mat.T) / 2.0
        note_workspace(mat, "stream/chunk_system")
        context = f"chunk {chunk_no} (columns {start}..{start + cols.size - 1})"
        try:
            lu, piv = scipy.linalg.lu_factor(mat)
        except (scipy.linalg.LinAlgError, ValueError) as exc:
            raise IllConditionedError(f"{context}: factorization failed ({exc})") from exc
        diag = np.abs(np.diag(lu))
        if diag.min() == 0.0 or not np.all(np.isfinite(diag)):
            raise IllConditionedError(f"{context}: system is numerically singular")
        corrections.append((w, (lu, piv)))

    x = apply_running(b)
    if not np.all(np.isfinite(x)):
        raise IllConditionedError("streamed inverse produced non-finite values")
    return x


def inverse_apply(factors: NystromFactors, plan: InverseApplyPlan, b) -> np.ndarray:
    """Apply (H_k + rho I)^-1 to a vector without forming a p x p array."""
    b = _as_vector(b, factors.p)
    kappa = plan.resolve_kappa(factors.k)
    if factors.retained.size == 0:
        return b / factors.rho
    if plan.variant == "full":
        return _full_apply(factors, b)
    return _streamed_apply(factors, kappa, b)


def inverse_dense(factors: NystromFactors, max_dim: int = DENSE_CAP_DEFAULT) -> np.ndarray:
    """Materialize (H_k + rho I)^-1 densely, for demos and reference checks."""
    if factors.p > max_dim:
        raise CapabilityError(
            f"refusing to materialize a {factors.p} x {factors.p} inverse (cap {max_dim})"
        )
    rho = factors.rho
    ridx = factors.retained
    out = np.eye(factors.p) / rho
    if ridx.size == 0:
        return out
    ell = factors.columns @ factors.pivot_eigvecs[:, ridx]
    mat = np.diag(factors.pivot_eigvals[ridx]) + (ell.T @ ell) / rho
    mat = (mat + mat.T) / 2.0
    y = _solve_symmetric(mat, ell.T, "dense inverse reconstruction")
    out -= (ell @ y) / rho**2
    return (out + out.T) / 2.0


def nystrom_error_opnorm(dense_h: DenseOperator, factors: NystromFactors) -> float:
    """Operator norm of H - H_k, the quantity the accuracy bound feeds on."""
    hk = factors.reconstruct_dense(max_dim=dense_h.max_dim)
    return operator_norm(dense_h.matrix - hk)


def theorem1_bound(g_norm: float, f_opnorm: float, rho: float, err_opnorm: float) -> float:
    """Upper bound on the hypergradient error ||h* - h||_2:

        ||g||_2 * ||F||_op * (1/rho) * err / (rho + err)

    with err = ||H - H_k||_op, valid for positive semidefinite H.
    """
    if g_norm < 0 or f_opnorm < 0 or err_opnorm < 0:
        raise ValueError("norms must be nonnegative")
    if rho <= 0:
        raise ValueError(f"rho must be positive, got {rho}")
    if err_opnorm == 0.0:
        return 0.0
    return g_norm * f_opnorm * err_opnorm / (rho * (rho + err_opnorm))
