"""Synthetic problems with fully analytic derivatives.

Three instruments, each desk-scale:

* a low-rank symmetric matrix for inverse-comparison demos,
* per-coordinate weight-decay tuning for logistic regression on synthetic
  Gaussian data (the main benchmark task),
* a quadratic bilevel problem whose hypergradient has a closed form, the
  ground-truth oracle for the whole pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .bilevel import BilevelProblem
from .errors import IllConditionedError
from .hypergrad import DerivativeBundle
from .linop import DenseOperator, HvpOracle


@dataclass(frozen=True)
class LowRankDemoSpec:
    """A p x p PSD matrix of exact rank ``rank`` plus its regularizer."""

    p: int = 40
    rank: int = 20
    rho: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.rank <= self.p:
            raise ValueError(f"need 1 <= rank <= p, got rank={self.rank}, p={self.p}")
        if self.rho <= 0:
            raise ValueError(f"rho must be positive, got {self.rho}")


def make_lowrank_demo(spec: LowRankDemoSpec) -> DenseOperator:
    """H = G G^T with G a (p, rank) standard-normal block: symmetric PSD,
    rank equal to spec.rank with probability one."""
    rng = np.random.default_rng(spec.seed)
    g = rng.standard_normal((spec.p, spec.rank))
    return DenseOperator(g @ g.T)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _bce_with_logits(z: np.ndarray, y: np.ndarray) -> float:
    # mean softplus(z) - y z, stable for large |z|
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


@dataclass(frozen=True)
class LogRegTaskSpec:
    """Synthetic binary classification with per-coordinate weight decay.

    Inputs are standard normal; labels are y = (w*.x + eps > 0) with a
    per-sample scalar noise eps ~ N(0, noise_sigma^2) on the logit and a
    fixed standard-normal w* drawn from the seed.
    """

    dim: int = 100
    n_train: int = 500
    n_val: int = 500
    noise_sigma: float = 0.1
    seed: int = 0


class LogRegTask:
    """Weight-decay tuning for logistic regression.

    Inner objective (mean binary cross entropy plus an un-normalized
    quadratic penalty):

        f(theta, phi) = BCE_train(theta) + theta . diag(phi) theta

    Outer objective: unregularized validation BCE, so dg/dphi = 0.
    """

    def __init__(self, spec: LogRegTaskSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        self.w_star = rng.standard_normal(spec.dim)
        self.x_train, self.y_train = self._draw(rng, spec.n_train)
        self.x_val, self.y_val = self._draw(rng, spec.n_val)

    def _draw(self, rng: np.random.Generator, n: int):
        x = rng.standard_normal((n, self.spec.dim))
        eps = rng.normal(0.0, self.spec.noise_sigma, size=n)
        y = (x @ self.w_star + eps > 0).astype(np.float64)
        return x, y

    def _split(self, split: str, batch=None):
        if split == "train":
            x, y = self.x_train, self.y_train
        elif split == "val":
            x, y = self.x_val, self.y_val
        else:
            raise ValueError(f"unknown split {split!r}")
        if batch is not None:
            x, y = x[batch], y[batch]
        return x, y

    # -- inner problem -------------------------------------------------

    def inner_loss(self, theta, phi, batch=None) -> float:
        x, y = self._split("train", batch)
        return _bce_with_logits(x @ theta, y) + float(theta @ (phi * theta))

    def inner_grad(self, theta, phi, batch=None) -> np.ndarray:
        x, y = self._split("train", batch)
        sig = _sigmoid(x @ theta)
        return x.T @ (sig - y) / x.shape[0] + 2.0 * phi * theta

    def hvp_oracle(self, theta, phi, batch=None) -> HvpOracle:
        x, _ = self._split("train", batch)
        sig = _sigmoid(x @ theta)
        s = sig * (1.0 - sig)
        n = x.shape[0]

        def apply(v):
            return x.T @ (s * (x @ v)) / n + 2.0 * phi * v

        def apply_block(block):
            return x.T @ (s[:, None] * (x @ block)) / n + 2.0 * phi[:, None] * block

        return HvpOracle(self.spec.dim, apply, apply_block, check_symmetry=False)

    def hessian_diag(self, theta, phi, batch=None) -> np.ndarray:
        x, _ = self._split("train", batch)
        sig = _sigmoid(x @ theta)
        s = sig * (1.0 - sig)
        return s @ (x * x) / x.shape[0] + 2.0 * phi

    def mixed_transpose(self, theta, phi, batch=None):
        # d^2 f / dphi dtheta = 2 diag(theta); transpose-apply is 2 theta * v
        return lambda v: 2.0 * theta * v

    # -- outer problem -------------------------------------------------

    def outer_loss(self, theta, phi, batch=None) -> float:
        x, y = self._split("val", batch)
        return _bce_with_logits(x @ theta, y)

    def outer_grad_theta(self, theta, phi, batch=None) -> np.ndarray:
        x, y = self._split("val", batch)
        return x.T @ (_sigmoid(x @ theta) - y) / x.shape[0]

    def outer_grad_phi(self, theta, phi, batch=None) -> np.ndarray:
        return np.zeros(self.spec.dim)

    # -- assembly ------------------------------------------------------

    def bundle(self, theta, phi, batch=None) -> DerivativeBundle:
        return DerivativeBundle(
            grad_outer_theta=self.outer_grad_theta(theta, phi),
            grad_outer_phi=self.outer_grad_phi(theta, phi),
            hvp=self.hvp_oracle(theta, phi, batch),
            mixed_apply_transpose=self.mixed_transpose(theta, phi, batch),
            hvp_diag=self.hessian_diag(theta, phi, batch),
        )

    def problem(self) -> BilevelProblem:
        d = self.spec.dim
        return BilevelProblem(
            p=d,
            h=d,
            name="logreg-weight-decay",
            n_train=self.spec.n_train,
            inner_loss=self.inner_loss,
            inner_grad=self.inner_grad,
            outer_loss=self.outer_loss,
            outer_grad_theta=self.outer_grad_theta,
            outer_grad_phi=self.outer_grad_phi,
            hvp_at=self.hvp_oracle,
            mixed_at=self.mixed_transpose,
            hvp_diag_at=self.hessian_diag,
            init_theta=lambda rng: np.zeros(d),
            init_phi=lambda: np.ones(d),
        )


def logreg_bundle(task: LogRegTask, theta, phi, batch=None):
    """Derivative bundle plus the current train/val losses."""
    losses = {
        "train": task.inner_loss(theta, phi, batch),
        "val": task.outer_loss(theta, phi),
    }
    return task.bundle(theta, phi, batch), losses


@dataclass(frozen=True)
class QuadraticTaskSpec:
    """Quadratic bilevel problem with a closed-form hypergradient.

    Inner:  f(theta, phi) = 1/2 theta.A theta - b.theta
                            + 1/2 theta.diag(phi) theta
    Outer:  g(theta) = 1/2 ||theta - theta_target||^2

    The inner optimum theta*(phi) = (A + diag(phi))^-1 b is available in
    closed form, and so is dg/dphi; this is the pipeline's ground truth.
    """

    a_matrix: np.ndarray
    b: np.ndarray
    theta_target: np.ndarray
    seed: int = 0

    def __post_init__(self):
        a = np.asarray(self.a_matrix, dtype=np.float64)
        object.__setattr__(self, "a_matrix", (a + a.T) / 2.0)
        object.__setattr__(self, "b", np.asarray(self.b, dtype=np.float64))
        object.__setattr__(
            self, "theta_target", np.asarray(self.theta_target, dtype=np.float64)
        )
        p = self.a_matrix.shape[0]
        if self.a_matrix.shape != (p, p) or self.b.shape != (p,) or self.theta_target.shape != (p,):
            raise ValueError("inconsistent quadratic task shapes")
        if scipy.linalg.eigvalsh(self.a_matrix).min() <= 0:
            raise ValueError("A must be symmetric positive definite")

    @property
    def p(self) -> int:
        return self.b.shape[0]

    @classmethod
    def random(cls, p: int, seed: int) -> "QuadraticTaskSpec":
        rng = np.random.default_rng(seed)
        m = rng.standard_normal((p, p))
        a = m @ m.T / p + 0.5 * np.eye(p)
        return cls(a, rng.standard_normal(p), rng.standard_normal(p), seed)


class QuadraticTask:
    def __init__(self, spec: QuadraticTaskSpec):
        self.spec = spec

    def theta_star(self, phi) -> np.ndarray:
        """Exact inner optimum (A + diag(phi))^-1 b."""
        try:
            cho = scipy.linalg.cho_factor(self.spec.a_matrix + np.diag(phi))
            return scipy.linalg.cho_solve(cho, self.spec.b)
        except (scipy.linalg.LinAlgError, np.linalg.LinAlgError) as exc:
            raise IllConditionedError(
                f"A + diag(phi) is not positive definite: {exc}"
            ) from exc

    def inner_loss(self, theta, phi, batch=None) -> float:
        a = self.spec.a_matrix
        return float(0.5 * theta @ (a @ theta) - self.spec.b @ theta + 0.5 * theta @ (phi * theta))

    def inner_grad(self, theta, phi, batch=None) -> np.ndarray:
        return self.spec.a_matrix @ theta - self.spec.b + phi * theta

    def hvp_oracle(self, theta, phi, batch=None) -> HvpOracle:
        a = self.spec.a_matrix

        def apply(v):
            return a @ v + phi * v

        def apply_block(block):
            return a @ block + phi[:, None] * block

        return HvpOracle(self.spec.p, apply, apply_block, check_symmetry=False)

    def hessian_dense(self, phi) -> DenseOperator:
        return DenseOperator(self.spec.a_matrix + np.diag(phi))

    def hessian_diag(self, theta, phi, batch=None) -> np.ndarray:
        return np.diag(self.spec.a_matrix) + phi

    def mixed_transpose(self, theta, phi, batch=None):
        # d^2 f / dphi dtheta = diag(theta)
        return lambda v: theta * v

    def mixed_dense(self, theta) -> np.ndarray:
        return np.diag(theta)

    def outer_loss(self, theta, phi, batch=None) -> float:
        d = theta - self.spec.theta_target
        return float(0.5 * d @ d)

    def outer_grad_theta(self, theta, phi, batch=None) -> np.ndarray:
        return theta - self.spec.theta_target

    def outer_grad_phi(self, theta, phi, batch=None) -> np.ndarray:
        return np.zeros(self.spec.p)

    def bundle(self, theta, phi, batch=None) -> DerivativeBundle:
        return DerivativeBundle(
            grad_outer_theta=self.outer_grad_theta(theta, phi),
            grad_outer_phi=self.outer_grad_phi(theta, phi),
            hvp=self.hvp_oracle(theta, phi, batch),
            mixed_apply_transpose=self.mixed_transpose(theta, phi, batch),
            hvp_diag=self.hessian_diag(theta, phi, batch),
        )

    def problem(self) -> BilevelProblem:
        p = self.spec.p
        return BilevelProblem(
            p=p,
            h=p,
            name="quadratic-oracle",
            n_train=0,
            inner_loss=self.inner_loss,
            inner_grad=self.inner_grad,
            outer_loss=self.outer_loss,
            outer_grad_theta=self.outer_grad_theta,
            outer_grad_phi=self.outer_grad_phi,
            hvp_at=self.hvp_oracle,
            mixed_at=self.mixed_transpose,
            hvp_diag_at=self.hessian_diag,
            init_theta=lambda rng: np.zeros(p),
            init_phi=lambda: np.ones(p),
        )


def quadratic_closed_form_hypergradient(spec: QuadraticTaskSpec, phi) -> np.ndarray:
    """Exact dg/dphi at the inner optimum:

        -diag(theta*) (A + diag(phi))^-1 (theta* - theta_target).
    """
    task = QuadraticTask(spec)
    theta_star = task.theta_star(phi)
    cho = scipy.linalg.cho_factor(spec.a_matrix + np.diag(phi))
    u = scipy.linalg.cho_solve(cho, theta_star - spec.theta_target)
    return -theta_star * u
