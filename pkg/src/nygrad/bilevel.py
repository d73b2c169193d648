"""Warm-start alternating bilevel optimization driver.

A run interleaves T inner gradient steps with one outer hypergradient step,
repeating for a configured number of outer updates, with an optional inner
reset after every outer update. One trailing inner phase follows the last
outer update so the final validation loss reflects the final outer
parameters; a schedule with zero outer steps therefore still performs T
inner steps.

Everything is seeded and single-threaded runs are bit-reproducible.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from .errors import DivergenceError, NygradError
from .hypergrad import DerivativeBundle, IhvpConfig, hypergradient
from .linop import HvpOracle


def fmt17(x) -> str:
    """Float to text at 17 significant digits (round-trips binary64)."""
    return f"{float(x):.17g}"


# ---------------------------------------------------------------------------
# Inner/outer optimizers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SgdConfig:
    lr: float

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")


@dataclass(frozen=True)
class SgdMomentumConfig:
    lr: float
    momentum: float

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")


@dataclass(frozen=True)
class AdamConfig:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")


OptimizerConfig = Union[SgdConfig, SgdMomentumConfig, AdamConfig]


class _Sgd:
    def __init__(self, cfg: SgdConfig):
        self.lr = cfg.lr

    def step(self, x, grad):
        return x - self.lr * grad


class _SgdMomentum:
    """Heavy-ball momentum: buf <- mu buf + grad; x <- x - lr buf."""

    def __init__(self, cfg: SgdMomentumConfig):
        self.lr = cfg.lr
        self.mu = cfg.momentum
        self.buf = None

    def step(self, x, grad):
        self.buf = grad if self.buf is None else self.mu * self.buf + grad
        return x - self.lr * self.buf


class _Adam:
    def __init__(self, cfg: AdamConfig):
        self.cfg = cfg
        self.m = None
        self.v = None
        self.t = 0

    def step(self, x, grad):
        c = self.cfg
        if self.m is None:
            self.m = np.zeros_like(x)
            self.v = np.zeros_like(x)
        self.t += 1
        self.m = c.beta1 * self.m + (1 - c.beta1) * grad
        self.v = c.beta2 * self.v + (1 - c.beta2) * grad * grad
        m_hat = self.m / (1 - c.beta1**self.t)
        v_hat = self.v / (1 - c.beta2**self.t)
        return x - c.lr * m_hat / (np.sqrt(v_hat) + c.eps)


def build_optimizer(cfg: OptimizerConfig):
    """Fresh optimizer state for one parameter vector."""
    if isinstance(cfg, SgdConfig):
        return _Sgd(cfg)
    if isinstance(cfg, SgdMomentumConfig):
        return _SgdMomentum(cfg)
    if isinstance(cfg, AdamConfig):
        return _Adam(cfg)
    raise TypeError(f"unknown optimizer config {type(cfg).__name__}")


def optimizer_to_dict(cfg: OptimizerConfig) -> dict:
    if isinstance(cfg, SgdConfig):
        return {"type": "sgd", "lr": cfg.lr}
    if isinstance(cfg, SgdMomentumConfig):
        return {"type": "sgd-momentum", "lr": cfg.lr, "momentum": cfg.momentum}
    if isinstance(cfg, AdamConfig):
        return {
            "type": "adam",
            "lr": cfg.lr,
            "beta1": cfg.beta1,
            "beta2": cfg.beta2,
            "eps": cfg.eps,
        }
    raise TypeError(f"unknown optimizer config {type(cfg).__name__}")


def optimizer_from_dict(d: dict) -> OptimizerConfig:
    d = dict(d)
    kind = d.pop("type", None)
    builders = {"sgd": SgdConfig, "sgd-momentum": SgdMomentumConfig, "adam": AdamConfig}
    if kind not in builders:
        raise ValueError(f"unknown optimizer type {kind!r}")
    try:
        return builders[kind](**d)
    except TypeError as exc:
        raise ValueError(f"bad optimizer fields for {kind!r}: {exc}") from exc


# ---------------------------------------------------------------------------
# Problem and schedule contracts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BilevelProblem:
    """Callable bundle defining one bilevel problem.

    All callables take (theta, phi, batch) where batch is either None
    (full batch) or an index array into the training set. ``hvp_at`` must
    return an oracle satisfying the symmetry contract; ``init_theta``
    consumes a seeded generator so inner resets are reproducible.
    """

    p: int
    h: int
    name: str
    inner_loss: Callable
    inner_grad: Callable
    outer_loss: Callable
    outer_grad_theta: Callable
    outer_grad_phi: Callable
    hvp_at: Callable[..., HvpOracle]
    mixed_at: Callable
    init_theta: Callable[[np.random.Generator], np.ndarray]
    init_phi: Callable[[], np.ndarray]
    hvp_diag_at: Callable | None = None
    n_train: int = 0


def bundle_at(problem: BilevelProblem, theta, phi, batch=None) -> DerivativeBundle:
    """Assemble the derivative bundle of ``problem`` at (theta, phi)."""
    diag = problem.hvp_diag_at(theta, phi, batch) if problem.hvp_diag_at else None
    return DerivativeBundle(
        grad_outer_theta=problem.outer_grad_theta(theta, phi),
        grad_outer_phi=problem.outer_grad_phi(theta, phi),
        hvp=problem.hvp_at(theta, phi, batch),
        mixed_apply_transpose=problem.mixed_at(theta, phi, batch),
        hvp_diag=diag,
    )


@dataclass(frozen=True)
class ScheduleConfig:
    """T inner steps per outer update, for a fixed number of outer updates.

    ``phi_min``/``phi_max`` optionally project the outer iterate onto a box
    after each update. The hypergradient is only meaningful where the inner
    solver actually reaches a near-stationary point; for tasks whose inner
    curvature depends on phi (weight decay), iterates outside the solver's
    stable range produce garbage gradients and runaway feedback, so the
    driver supports confining phi to the validity region.
    """

    inner_steps: int
    outer_steps: int
    reset_inner_on_outer: bool = True
    inner_optimizer: OptimizerConfig = SgdConfig(0.1)
    outer_optimizer: OptimizerConfig = SgdMomentumConfig(1.0, 0.9)
    seed: int = 0
    batch_size: int | None = None
    phi_min: float | None = None
    phi_max: float | None = None

    def __post_init__(self):
        if self.inner_steps < 1:
            raise ValueError(f"inner_steps must be >= 1, got {self.inner_steps}")
        if self.outer_steps < 0:
            raise ValueError(f"outer_steps must be >= 0, got {self.outer_steps}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if (
            self.phi_min is not None
            and self.phi_max is not None
            and self.phi_min > self.phi_max
        ):
            raise ValueError("phi_min must not exceed phi_max")

    def to_dict(self) -> dict:
        return {
            "inner_steps": self.inner_steps,
            "outer_steps": self.outer_steps,
            "reset_inner_on_outer": self.reset_inner_on_outer,
            "inner_optimizer": optimizer_to_dict(self.inner_optimizer),
            "outer_optimizer": optimizer_to_dict(self.outer_optimizer),
            "seed": self.seed,
            "batch_size": self.batch_size,
            "phi_min": self.phi_min,
            "phi_max": self.phi_max,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScheduleConfig":
        d = dict(d)
        for key in ("inner_optimizer", "outer_optimizer"):
            if key in d:
                d[key] = optimizer_from_dict(d[key])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ValueError(f"bad schedule fields: {exc}") from exc


# ---------------------------------------------------------------------------
# Run records
# ---------------------------------------------------------------------------


@dataclass
class InnerStep:
    phase: int
    step: int
    train_loss: float


@dataclass
class OuterStep:
    step: int
    val_loss: float
    hypergrad_norm: float
    inner_grad_norm: float
    oracle_calls: int
    wall_time_s: float


CSV_COLUMNS = [
    "kind",
    "backend",
    "seed",
    "outer_step",
    "inner_step",
    "train_loss",
    "val_loss",
    "hypergrad_norm",
    "inner_grad_norm",
    "oracle_calls",
    "wall_ms",
]


@dataclass
class RunRecord:
    """Everything one bilevel run produced, CSV/JSON-serializable.

    Wall-time fields are measured and therefore vary between invocations;
    every other field is a deterministic function of (problem seed,
    schedule, backend config).
    """

    backend: str
    seed: int
    config: dict
    inner: list[InnerStep] = field(default_factory=list)
    outer: list[OuterStep] = field(default_factory=list)
    final_val_loss: float | None = None
    error: str | None = None

    def val_losses(self) -> list[float]:
        return [o.val_loss for o in self.outer]

    def to_rows(self) -> list[dict]:
        rows = []
        base = {"backend": self.backend, "seed": self.seed}
        for s in self.inner:
            rows.append(
                base
                | {
                    "kind": "inner",
                    "outer_step": s.phase,
                    "inner_step": s.step,
                    "train_loss": fmt17(s.train_loss),
                }
            )
        for o in self.outer:
            rows.append(
                base
                | {
                    "kind": "outer",
                    "outer_step": o.step,
                    "val_loss": fmt17(o.val_loss),
                    "hypergrad_norm": fmt17(o.hypergrad_norm),
                    "inner_grad_norm": fmt17(o.inner_grad_norm),
                    "oracle_calls": o.oracle_calls,
                    "wall_ms": fmt17(o.wall_time_s * 1e3),
                }
            )
        if self.final_val_loss is not None:
            rows.append(
                base
                | {
                    "kind": "final",
                    "outer_step": len(self.outer),
                    "val_loss": fmt17(self.final_val_loss),
                }
            )
        return rows

    def write_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS, restval="")
            writer.writeheader()
            writer.writerows(self.to_rows())

    def summary(self) -> dict:
        return {
            "backend": self.backend,
            "seed": self.seed,
            "config": self.config,
            "n_inner_steps": len(self.inner),
            "n_outer_steps": len(self.outer),
            "val_losses": self.val_losses(),
            "final_val_loss": self.final_val_loss,
            "total_oracle_calls": int(sum(o.oracle_calls for o in self.outer)),
            "error": self.error,
        }

    def write_json(self, path) -> None:
        import json

        with open(path, "w") as f:
            json.dump(self.summary(), f, indent=2)
            f.write("\n")


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------

_BATCH_STREAM_TAG = 0xBA7C4


def _phase_rng(seed: int, phase: int) -> np.random.Generator:
    return np.random.default_rng([seed, phase])


def run(problem: BilevelProblem, schedule: ScheduleConfig, ihvp: IhvpConfig) -> RunRecord:
    """Execute one warm-start alternating bilevel run.

    ``schedule.outer_steps`` outer updates are performed, each computed at
    the (theta_T, phi) reached after T inner steps; a trailing inner phase
    evaluates the final validation loss. Non-finite losses raise
    :class:`DivergenceError`; any abort attaches the partial record to the
    exception as ``partial_record``.
    """
    record = RunRecord(
        backend=ihvp.backend,
        seed=schedule.seed,
        config={
            "problem": problem.name,
            "schedule": schedule.to_dict(),
            "ihvp": ihvp.label(),
        },
    )
    outer_opt = build_optimizer(schedule.outer_optimizer)
    phi = problem.init_phi()
    theta = None
    inner_opt = None
    batch_rng = None
    if schedule.batch_size is not None and problem.n_train > 0:
        batch_rng = np.random.default_rng([schedule.seed, _BATCH_STREAM_TAG])

    global_step = 0
    try:
        for phase in range(schedule.outer_steps + 1):
            if theta is None or schedule.reset_inner_on_outer:
                theta = problem.init_theta(_phase_rng(schedule.seed, phase))
                inner_opt = build_optimizer(schedule.inner_optimizer)
            for t in range(schedule.inner_steps):
                batch = None
                if batch_rng is not None:
                    batch = batch_rng.choice(
                        problem.n_train,
                        size=min(schedule.batch_size, problem.n_train),
                        replace=False,
                    )
                loss = problem.inner_loss(theta, phi, batch)
                if not np.isfinite(loss):
                    raise DivergenceError(
                        f"non-finite training loss at inner step {global_step} "
                        f"(phase {phase})",
                        step=global_step,
                    )
                record.inner.append(InnerStep(phase, t, loss))
                theta = inner_opt.step(theta, problem.inner_grad(theta, phi, batch))
                global_step += 1
            val_loss = problem.outer_loss(theta, phi)
            if not np.isfinite(val_loss):
                raise DivergenceError(
                    f"non-finite validation loss after phase {phase}", step=global_step
                )
            if phase < schedule.outer_steps:
                bundle = bundle_at(problem, theta, phi)  # hypergradient on the full batch
                h, diags = hypergradient(bundle, ihvp)
                inner_gnorm = float(np.linalg.norm(problem.inner_grad(theta, phi, None)))
                record.outer.append(
                    OuterStep(
                        step=phase,
                        val_loss=val_loss,
                        hypergrad_norm=float(np.linalg.norm(h)),
                        inner_grad_norm=inner_gnorm,
                        oracle_calls=diags.oracle_calls,
                        wall_time_s=diags.wall_time_s,
                    )
                )
                phi = outer_opt.step(phi, h)
                if schedule.phi_min is not None:
                    phi = np.maximum(phi, schedule.phi_min)
                if schedule.phi_max is not None:
                    phi = np.minimum(phi, schedule.phi_max)
            else:
                record.final_val_loss = val_loss
    except NygradError as exc:
        record.error = str(exc)
        exc.partial_record = record
        raise
    return record


def _run_cell(
    problem: BilevelProblem | Callable[[int], BilevelProblem],
    schedule: ScheduleConfig,
    cfg: IhvpConfig,
    seed: int,
) -> RunRecord:
    prob = problem(seed) if callable(problem) else problem
    sched = dataclasses.replace(schedule, seed=seed)
    try:
        return run(prob, sched, cfg)
    except NygradError as exc:
        rec = exc.partial_record
        if rec is None:
            rec = RunRecord(cfg.backend, seed, {"ihvp": cfg.label()})
        rec.error = str(exc)
        return rec


def compare_backends(
    problem: BilevelProblem | Callable[[int], BilevelProblem],
    schedule: ScheduleConfig,
    ihvp_list: list[IhvpConfig],
    seeds: list[int],
    jobs: int = 1,
) -> list[RunRecord]:
    """Run the (seed x backend) cross product with shared data streams.

    ``problem`` may be a factory mapping seed -> problem so each seed gets
    its own data; within one seed every backend sees identical data and
    identical initialization. Records come back ordered by (seed, backend
    index) regardless of ``jobs``. Individual run failures are captured in
    the record's ``error`` field instead of aborting the sweep.
    """
    if not ihvp_list:
        raise ValueError("ihvp_list must be nonempty")
    if not seeds:
        raise ValueError("seeds must be nonempty")
    cells = [(cfg, seed) for seed in seeds for cfg in ihvp_list]
    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(
                pool.map(lambda c: _run_cell(problem, schedule, c[0], c[1]), cells)
            )
    return [_run_cell(problem, schedule, cfg, seed) for cfg, seed in cells]
