"""Batch experiment front-end.

Five subcommands, each driven by a JSON config file (or built-in defaults):

  invert-demo       dense-inverse comparison on a low-rank matrix
  logreg            weight-decay tuning benchmark, backends side by side
  quadratic-oracle  pipeline hypergradient vs the closed form
  bound-check       numerical verification of the accuracy bound
  bench             runtime / workspace trends per backend

Outputs are CSV (RFC-4180, header row, floats at 17 significant digits),
a JSON summary, the resolved config echo, and SVG plots unless --no-plots.

Exit codes: 0 success, 1 config error, 2 numerical failure, 3 IO error.
"""

from __future__ import annotations

import argparse
import csv
import json
import statistics
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .bilevel import (
    RunRecord,
    ScheduleConfig,
    SgdConfig,
    SgdMomentumConfig,
    compare_backends,
    fmt17,
)
from .errors import NygradError
from .hypergrad import (
    CgIhvp,
    IhvpConfig,
    NeumannIhvp,
    NystromIhvp,
    hypergradient,
    ihvp_from_dict,
    ihvp_to_dict,
)
from .iterative import CgConfig, NeumannConfig
from .linop import DenseOperator, dense_regularized_inverse_apply, operator_norm
from .nystrom import SamplingStrategy, build_factors, inverse_dense, theorem1_bound
from .tasks import (
    LogRegTask,
    LogRegTaskSpec,
    LowRankDemoSpec,
    QuadraticTask,
    QuadraticTaskSpec,
    make_lowrank_demo,
    quadratic_closed_form_hypergradient,
)
from .workspace import track_workspace


class ConfigError(Exception):
    """Bad or unknown configuration input (exit code 1)."""


BOUND_SLACK = 1e-9


def _no_extras(d: dict, context: str) -> None:
    if d:
        raise ConfigError(f"unknown keys in {context}: {sorted(d)}")


def _pop_list(d: dict, key: str, default: list, kind, context: str, allow_empty=False) -> list:
    value = d.pop(key, None)
    if value is None:
        return list(default)
    if not isinstance(value, list) or (not value and not allow_empty):
        raise ConfigError(f"{context}.{key} must be a nonempty list")
    try:
        return [kind(v) for v in value]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{context}.{key}: {exc}") from exc


# ---------------------------------------------------------------------------
# Experiment configs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InvertDemoConfig:
    p: int = 40
    rank: int = 20
    rho: float = 0.1
    nystrom_ranks: tuple = (5, 10, 20)
    neumann_iters: tuple = (5, 10, 20)
    neumann_alpha: float = 0.01
    seeds: tuple = (0, 1, 2, 3, 4)
    output_dir: str = "out/invert-demo"

    experiment = "invert-demo"

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("nystrom_ranks", "neumann_iters", "seeds"):
            d[key] = list(d[key])
        return {"experiment": self.experiment, **d}

    @classmethod
    def from_dict(cls, d: dict) -> "InvertDemoConfig":
        d = dict(d)
        base = cls()
        kwargs = {
            "p": int(d.pop("p", base.p)),
            "rank": int(d.pop("rank", base.rank)),
            "rho": float(d.pop("rho", base.rho)),
            "neumann_alpha": float(d.pop("neumann_alpha", base.neumann_alpha)),
            "nystrom_ranks": tuple(
                _pop_list(d, "nystrom_ranks", list(base.nystrom_ranks), int, "invert-demo")
            ),
            "neumann_iters": tuple(
                _pop_list(d, "neumann_iters", list(base.neumann_iters), int, "invert-demo")
            ),
            "seeds": tuple(_pop_list(d, "seeds", list(base.seeds), int, "invert-demo")),
            "output_dir": str(d.pop("output_dir", base.output_dir)),
        }
        _no_extras(d, "invert-demo config")
        return cls(**kwargs)


def _default_logreg_schedule() -> ScheduleConfig:
    # The benchmark protocol: T=100 inner SGD steps at lr 0.1 with reset,
    # outer SGD lr 1.0 momentum 0.9, outer iterates confined to [0, 8]
    # (the region where the inner solver converges; see README).
    return ScheduleConfig(
        inner_steps=100,
        outer_steps=100,
        reset_inner_on_outer=True,
        inner_optimizer=SgdConfig(0.1),
        outer_optimizer=SgdMomentumConfig(1.0, 0.9),
        phi_min=0.0,
        phi_max=8.0,
    )


def _default_logreg_backends() -> tuple:
    return (
        NystromIhvp(k=5, rho=0.01),
        CgIhvp(CgConfig(max_iters=5), rho=0.01),
        NeumannIhvp(NeumannConfig(truncation=5, alpha=0.01), rho=0.01),
    )


@dataclass(frozen=True)
class LogRegConfig:
    task: LogRegTaskSpec = LogRegTaskSpec()
    schedule: ScheduleConfig = field(default_factory=_default_logreg_schedule)
    ihvp: tuple = field(default_factory=_default_logreg_backends)
    seeds: tuple = (0, 1, 2, 3, 4)
    sweep_rho: tuple = ()
    sweep_k: tuple = ()
    output_dir: str = "out/logreg"

    experiment = "logreg"

    def to_dict(self) -> dict:
        task = asdict(self.task)
        task.pop("seed")  # per-run seeds come from the seeds list
        return {
            "experiment": self.experiment,
            "task": task,
            "schedule": {
                k: v for k, v in self.schedule.to_dict().items() if k != "seed"
            },
            "ihvp": [ihvp_to_dict(c) for c in self.ihvp],
            "seeds": list(self.seeds),
            "sweep_rho": list(self.sweep_rho),
            "sweep_k": list(self.sweep_k),
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LogRegConfig":
        d = dict(d)
        base = cls()
        task_d = dict(d.pop("task", {}))
        task_d.pop("seed", None)
        try:
            task = LogRegTaskSpec(**task_d)
        except TypeError as exc:
            raise ConfigError(f"bad task fields: {exc}") from exc
        sched_d = dict(d.pop("schedule", {}))
        sched_d.pop("seed", None)
        if sched_d:
            defaults = {
                k: v for k, v in base.schedule.to_dict().items() if k != "seed"
            }
            defaults.update(sched_d)
            try:
                schedule = ScheduleConfig.from_dict(defaults)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        else:
            schedule = base.schedule
        ihvp_d = d.pop("ihvp", None)
        if ihvp_d is None:
            ihvp = base.ihvp
        else:
            if not isinstance(ihvp_d, list) or not ihvp_d:
                raise ConfigError("ihvp must be a nonempty list of backend configs")
            try:
                ihvp = tuple(ihvp_from_dict(entry) for entry in ihvp_d)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        kwargs = {
            "task": task,
            "schedule": schedule,
            "ihvp": ihvp,
            "seeds": tuple(_pop_list(d, "seeds", list(base.seeds), int, "logreg")),
            "sweep_rho": tuple(_pop_list(d, "sweep_rho", [], float, "logreg", allow_empty=True)),
            "sweep_k": tuple(_pop_list(d, "sweep_k", [], int, "logreg", allow_empty=True)),
            "output_dir": str(d.pop("output_dir", base.output_dir)),
        }
        _no_extras(d, "logreg config")
        return cls(**kwargs)


@dataclass(frozen=True)
class QuadraticOracleConfig:
    p: int = 20
    rho: float = 1e-8
    tolerance: float = 1e-4
    seeds: tuple = tuple(range(20))
    output_dir: str = "out/quadratic-oracle"

    experiment = "quadratic-oracle"

    def to_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "p": self.p,
            "rho": self.rho,
            "tolerance": self.tolerance,
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuadraticOracleConfig":
        d = dict(d)
        base = cls()
        kwargs = {
            "p": int(d.pop("p", base.p)),
            "rho": float(d.pop("rho", base.rho)),
            "tolerance": float(d.pop("tolerance", base.tolerance)),
            "seeds": tuple(_pop_list(d, "seeds", list(base.seeds), int, "quadratic-oracle")),
            "output_dir": str(d.pop("output_dir", base.output_dir)),
        }
        _no_extras(d, "quadratic-oracle config")
        return cls(**kwargs)


@dataclass(frozen=True)
class BoundCheckConfig:
    instances: int = 100
    p_min: int = 20
    p_max: int = 100
    rho_values: tuple = (0.01, 0.1, 1.0)
    include_indefinite: bool = False
    seed: int = 0
    output_dir: str = "out/bound-check"

    experiment = "bound-check"

    def to_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "instances": self.instances,
            "p_min": self.p_min,
            "p_max": self.p_max,
            "rho_values": list(self.rho_values),
            "include_indefinite": self.include_indefinite,
            "seed": self.seed,
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BoundCheckConfig":
        d = dict(d)
        base = cls()
        kwargs = {
            "instances": int(d.pop("instances", base.instances)),
            "p_min": int(d.pop("p_min", base.p_min)),
            "p_max": int(d.pop("p_max", base.p_max)),
            "rho_values": tuple(
                _pop_list(d, "rho_values", list(base.rho_values), float, "bound-check")
            ),
            "include_indefinite": bool(d.pop("include_indefinite", base.include_indefinite)),
            "seed": int(d.pop("seed", base.seed)),
            "output_dir": str(d.pop("output_dir", base.output_dir)),
        }
        _no_extras(d, "bound-check config")
        if kwargs["instances"] < 1:
            raise ConfigError("instances must be >= 1")
        if not 1 <= kwargs["p_min"] <= kwargs["p_max"]:
            raise ConfigError("need 1 <= p_min <= p_max")
        return cls(**kwargs)


@dataclass(frozen=True)
class BenchConfig:
    dim: int = 400
    n_train: int = 2000
    iter_sizes: tuple = (5, 10, 20)
    rank_sizes: tuple = (5, 10, 20, 40)
    rho: float = 0.01
    alpha: float = 0.01
    repetitions: int = 5
    warmup: int = 1
    seed: int = 0
    output_dir: str = "out/bench"

    experiment = "bench"

    def __post_init__(self):
        if self.repetitions < 3:
            raise ConfigError("bench repetitions must be >= 3")
        if self.warmup < 1:
            raise ConfigError("bench warmup must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["iter_sizes"] = list(self.iter_sizes)
        d["rank_sizes"] = list(self.rank_sizes)
        return {"experiment": self.experiment, **d}

    @classmethod
    def from_dict(cls, d: dict) -> "BenchConfig":
        d = dict(d)
        base = cls()
        kwargs = {
            "dim": int(d.pop("dim", base.dim)),
            "n_train": int(d.pop("n_train", base.n_train)),
            "iter_sizes": tuple(_pop_list(d, "iter_sizes", list(base.iter_sizes), int, "bench")),
            "rank_sizes": tuple(_pop_list(d, "rank_sizes", list(base.rank_sizes), int, "bench")),
            "rho": float(d.pop("rho", base.rho)),
            "alpha": float(d.pop("alpha", base.alpha)),
            "repetitions": int(d.pop("repetitions", base.repetitions)),
            "warmup": int(d.pop("warmup", base.warmup)),
            "seed": int(d.pop("seed", base.seed)),
            "output_dir": str(d.pop("output_dir", base.output_dir)),
        }
        _no_extras(d, "bench config")
        return cls(**kwargs)


_CONFIG_TYPES = {
    "invert-demo": InvertDemoConfig,
    "logreg": LogRegConfig,
    "quadratic-oracle": QuadraticOracleConfig,
    "bound-check": BoundCheckConfig,
    "bench": BenchConfig,
}

ExperimentConfig = (
    InvertDemoConfig | LogRegConfig | QuadraticOracleConfig | BoundCheckConfig | BenchConfig
)


def config_from_dict(d: dict) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigError("config root must be a JSON object")
    d = dict(d)
    experiment = d.pop("experiment", None)
    if experiment not in _CONFIG_TYPES:
        raise ConfigError(
            f"unknown experiment {experiment!r}; expected one of {sorted(_CONFIG_TYPES)}"
        )
    return _CONFIG_TYPES[experiment].from_dict(d)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(data)


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")


# ---------------------------------------------------------------------------
# CSV / plotting helpers
# ---------------------------------------------------------------------------


def _write_csv(path, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns, restval="")
        writer.writeheader()
        writer.writerows(rows)


def _write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


# ---------------------------------------------------------------------------
# invert-demo
# ---------------------------------------------------------------------------


def _neumann_inverse_dense(a_reg: np.ndarray, alpha: float, iters: int) -> np.ndarray:
    """alpha * sum_{i=0}^{l} (I - alpha A)^i, computed by the matrix recurrence."""
    eye = np.eye(a_reg.shape[0])
    step = eye - alpha * a_reg
    s = eye.copy()
    for _ in range(iters):
        s = eye + step @ s
    return alpha * s


def cmd_invert_demo(cfg: InvertDemoConfig, plots: bool = True, jobs: int = 1) -> int:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")

    rows = []
    panels = {}
    for seed in cfg.seeds:
        dense = make_lowrank_demo(LowRankDemoSpec(cfg.p, cfg.rank, cfg.rho, seed))
        a_reg = dense.matrix + cfg.rho * np.eye(cfg.p)
        true_inv = np.linalg.inv(a_reg)
        true_norm = float(np.linalg.norm(true_inv))
        if seed == cfg.seeds[0]:
            panels["true inverse"] = true_inv
        op = dense.oracle()
        for k in cfg.nystrom_ranks:
            idx = np.random.default_rng(seed).choice(cfg.p, size=k, replace=False)
            factors = build_factors(op, idx, cfg.rho, allow_degenerate=True)
            approx = inverse_dense(factors)
            err = float(np.linalg.norm(true_inv - approx))
            rows.append(
                {
                    "method": "nystrom",
                    "param": k,
                    "alpha": "",
                    "seed": seed,
                    "fro_error": fmt17(err),
                    "rel_fro_error": fmt17(err / true_norm),
                }
            )
            if seed == cfg.seeds[0]:
                panels[f"nystrom k={k}"] = approx
        for l in cfg.neumann_iters:
            approx = _neumann_inverse_dense(a_reg, cfg.neumann_alpha, l)
            err = float(np.linalg.norm(true_inv - approx))
            rows.append(
                {
                    "method": "neumann",
                    "param": l,
                    "alpha": fmt17(cfg.neumann_alpha),
                    "seed": seed,
                    "fro_error": fmt17(err),
                    "rel_fro_error": fmt17(err / true_norm),
                }
            )
            if seed == cfg.seeds[0]:
                panels[f"neumann l={l}"] = approx

    _write_csv(
        out / "errors.csv",
        ["method", "param", "alpha", "seed", "fro_error", "rel_fro_error"],
        rows,
    )
    if plots:
        plt = _pyplot()
        n = len(panels)
        fig, axes = plt.subplots(1, n, figsize=(2.4 * n, 2.6))
        vmax = max(abs(m).max() for m in panels.values())
        for ax, (title, mat) in zip(np.atleast_1d(axes), panels.items()):
            ax.imshow(mat, cmap="RdBu_r", vmin=-vmax, vmax=vmax)
            ax.set_title(title, fontsize=8)
            ax.set_xticks([])
            ax.set_yticks([])
        fig.suptitle(f"(A + {cfg.rho} I)^-1, rank-{cfg.rank} A, seed {cfg.seeds[0]}")
        fig.tight_layout()
        fig.savefig(out / "inverses.svg")
        plt.close(fig)
    return 0


# ---------------------------------------------------------------------------
# logreg
# ---------------------------------------------------------------------------

LOGREG_CSV_COLUMNS = [
    "outer_step",
    "inner_step",
    "train_loss",
    "val_loss",
    "backend",
    "seed",
    "wall_ms",
]


def _logreg_rows(rec: RunRecord) -> list[dict]:
    rows = []
    for s in rec.inner:
        rows.append(
            {
                "outer_step": s.phase,
                "inner_step": s.step,
                "train_loss": fmt17(s.train_loss),
                "backend": rec.backend,
                "seed": rec.seed,
            }
        )
    for o in rec.outer:
        rows.append(
            {
                "outer_step": o.step,
                "val_loss": fmt17(o.val_loss),
                "backend": rec.backend,
                "seed": rec.seed,
                "wall_ms": fmt17(o.wall_time_s * 1e3),
            }
        )
    if rec.final_val_loss is not None:
        rows.append(
            {
                "outer_step": len(rec.outer),
                "val_loss": fmt17(rec.final_val_loss),
                "backend": rec.backend,
                "seed": rec.seed,
            }
        )
    return rows


def _plot_logreg(records: list[RunRecord], out: Path) -> None:
    plt = _pyplot()
    by_backend: dict[str, list[RunRecord]] = {}
    for r in records:
        by_backend.setdefault(r.backend, []).append(r)

    fig, (ax_val, ax_train) = plt.subplots(2, 1, figsize=(7, 7))
    for backend, recs in by_backend.items():
        ok = [r for r in recs if r.error is None]
        if not ok:
            continue
        curves = np.array([r.val_losses() + [r.final_val_loss] for r in ok])
        ax_val.plot(np.arange(curves.shape[1]), curves.mean(axis=0), label=backend)
    ax_val.set_xlabel("outer step")
    ax_val.set_ylabel("validation loss (mean over seeds)")
    ax_val.legend()

    first_seed = records[0].seed if records else 0
    for backend, recs in by_backend.items():
        rec = next((r for r in recs if r.seed == first_seed and r.error is None), None)
        if rec is None:
            continue
        losses = [s.train_loss for s in rec.inner]
        ax_train.plot(np.arange(len(losses)), losses, label=backend, linewidth=0.7)
    ax_train.set_xlabel("inner iteration")
    ax_train.set_ylabel(f"training loss (seed {first_seed})")
    ax_train.legend()
    fig.tight_layout()
    fig.savefig(out / "losses.svg")
    plt.close(fig)


def cmd_logreg(cfg: LogRegConfig, plots: bool = True, jobs: int = 1) -> int:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")

    def factory(seed: int):
        return LogRegTask(replace(cfg.task, seed=seed)).problem()

    records = compare_backends(factory, cfg.schedule, list(cfg.ihvp), list(cfg.seeds), jobs)
    rows = []
    for rec in records:
        rows.extend(_logreg_rows(rec))
    _write_csv(out / "steps.csv", LOGREG_CSV_COLUMNS, rows)

    finals: dict[str, list[float]] = {}
    failures = []
    for rec in records:
        if rec.error is not None:
            failures.append({"backend": rec.backend, "seed": rec.seed, "error": rec.error})
        elif rec.final_val_loss is not None:
            finals.setdefault(rec.backend, []).append(rec.final_val_loss)
    summary = {
        "mean_final_val_loss": {b: float(np.mean(v)) for b, v in finals.items()},
        "final_val_loss": {b: v for b, v in finals.items()},
        "failures": failures,
    }

    if cfg.sweep_rho and cfg.sweep_k:
        sweep_rows = []
        grid_means = {}
        for rho in cfg.sweep_rho:
            for k in cfg.sweep_k:
                ihvp = NystromIhvp(k=k, rho=rho)
                recs = compare_backends(factory, cfg.schedule, [ihvp], list(cfg.seeds), jobs)
                vals = [r.final_val_loss for r in recs if r.error is None]
                for r in recs:
                    sweep_rows.append(
                        {
                            "rho": fmt17(rho),
                            "k": k,
                            "seed": r.seed,
                            "final_val_loss": "" if r.error else fmt17(r.final_val_loss),
                            "error": r.error or "",
                        }
                    )
                grid_means[f"rho={rho:g},k={k}"] = float(np.mean(vals)) if vals else None
        _write_csv(
            out / "sweep.csv", ["rho", "k", "seed", "final_val_loss", "error"], sweep_rows
        )
        means = [v for v in grid_means.values() if v is not None]
        summary["sweep_mean_final"] = grid_means
        summary["sweep_spread"] = (max(means) - min(means)) if means else None

    _write_json(out / "summary.json", summary)
    if plots:
        _plot_logreg(records, out)
    return 2 if failures else 0


# ---------------------------------------------------------------------------
# quadratic-oracle
# ---------------------------------------------------------------------------


def cmd_quadratic_oracle(cfg: QuadraticOracleConfig, plots: bool = True, jobs: int = 1) -> int:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")

    rows = []
    worst = 0.0
    for seed in cfg.seeds:
        spec = QuadraticTaskSpec.random(cfg.p, seed)
        task = QuadraticTask(spec)
        phi = np.ones(cfg.p)
        theta = task.theta_star(phi)
        bundle = task.bundle(theta, phi)
        ihvp = NystromIhvp(k=cfg.p, rho=cfg.rho, strategy=SamplingStrategy(seed=seed))
        h, diag = hypergradient(bundle, ihvp)
        h_ref = quadratic_closed_form_hypergradient(spec, phi)
        rel = float(np.linalg.norm(h - h_ref) / np.linalg.norm(h_ref))
        worst = max(worst, rel)
        rows.append(
            {
                "seed": seed,
                "p": cfg.p,
                "rel_error": fmt17(rel),
                "oracle_calls": diag.oracle_calls,
            }
        )
    _write_csv(out / "oracle.csv", ["seed", "p", "rel_error", "oracle_calls"], rows)
    _write_json(
        out / "summary.json",
        {"worst_rel_error": worst, "tolerance": cfg.tolerance, "passed": worst <= cfg.tolerance},
    )
    return 0 if worst <= cfg.tolerance else 2


# ---------------------------------------------------------------------------
# bound-check
# ---------------------------------------------------------------------------


def _bound_instance(rng: np.random.Generator, p: int, rho: float, indefinite: bool):
    """One random instance: (dense H, g, F, k). Low-rank half the time."""
    rank = p if rng.random() < 0.5 else int(rng.integers(1, p))
    g_mat = rng.standard_normal((p, rank))
    h_mat = g_mat @ g_mat.T / p
    if indefinite:
        h_mat -= 0.5 * float(np.trace(h_mat) / p) * np.eye(p)
    h_dim = int(rng.integers(2, max(3, p // 3) + 1))
    g_vec = rng.standard_normal(p)
    f_mat = rng.standard_normal((p, h_dim))
    k = int(rng.integers(1, p + 1))
    return DenseOperator(h_mat), g_vec, f_mat, k


def bound_check_instance(
    dense_h: DenseOperator, g_vec: np.ndarray, f_mat: np.ndarray, k: int, rho: float, seed: int
) -> tuple[float, float]:
    """(measured error, bound) with both hypergradients via dense solves.

    The measured side reconstructs H_k densely and inverts (H_k + rho I)
    by factorization, isolating the approximation error itself from the
    Woodbury evaluation path.
    """
    op = dense_h.oracle()
    idx = np.random.default_rng(seed).choice(dense_h.dim, size=k, replace=False)
    factors = build_factors(op, idx, rho, allow_degenerate=True)
    hk = DenseOperator(factors.reconstruct_dense())
    v_star = dense_regularized_inverse_apply(dense_h, rho, g_vec)
    v_k = dense_regularized_inverse_apply(hk, rho, g_vec)
    err = float(np.linalg.norm(f_mat.T @ (v_star - v_k)))
    err_op = operator_norm(dense_h.matrix - hk.matrix)
    bound = theorem1_bound(float(np.linalg.norm(g_vec)), operator_norm(f_mat), rho, err_op)
    return err, bound


def cmd_bound_check(cfg: BoundCheckConfig, plots: bool = True, jobs: int = 1) -> int:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")

    rows = []
    violations = 0
    for i in range(cfg.instances):
        rng = np.random.default_rng([cfg.seed, i])
        indefinite = cfg.include_indefinite and i % 10 == 9
        p = int(rng.integers(cfg.p_min, cfg.p_max + 1))
        rho = cfg.rho_values[i % len(cfg.rho_values)]
        dense_h, g_vec, f_mat, k = _bound_instance(rng, p, rho, indefinite)
        psd = bool(np.linalg.eigvalsh(dense_h.matrix).min() >= -1e-12)
        err, bound = bound_check_instance(dense_h, g_vec, f_mat, k, rho, seed=i)
        violated = psd and err > bound + BOUND_SLACK
        violations += int(violated)
        rows.append(
            {
                "instance": i,
                "p": p,
                "k": k,
                "rho": fmt17(rho),
                "psd": "yes" if psd else "non-PSD",
                "err": fmt17(err),
                "bound": fmt17(bound),
                "ratio": fmt17(err / bound) if bound > 0 else "",
                "violation": "yes" if violated else "no",
            }
        )
    _write_csv(
        out / "bound_check.csv",
        ["instance", "p", "k", "rho", "psd", "err", "bound", "ratio", "violation"],
        rows,
    )
    n_psd = sum(1 for r in rows if r["psd"] == "yes")
    _write_json(
        out / "summary.json",
        {
            "instances": cfg.instances,
            "psd_instances": n_psd,
            "violations": violations,
            "slack": BOUND_SLACK,
        },
    )
    if plots:
        plt = _pyplot()
        fig, ax = plt.subplots(figsize=(5, 5))
        errs = [float(r["err"]) for r in rows if r["psd"] == "yes"]
        bounds = [float(r["bound"]) for r in rows if r["psd"] == "yes"]
        ax.loglog(bounds, errs, ".", markersize=4)
        lo = min(min(errs, default=1e-12), min(bounds, default=1e-12)) + 1e-16
        hi = max(max(errs, default=1.0), max(bounds, default=1.0))
        ax.loglog([lo, hi], [lo, hi], "k--", linewidth=0.8, label="err = bound")
        ax.set_xlabel("bound")
        ax.set_ylabel("measured error")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "bounds.svg")
        plt.close(fig)
    return 2 if violations else 0


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BenchCell:
    """One (backend variant, size) measurement.

    ``workspace_peak_bytes`` is the largest single scratch allocation the
    IHVP solver kernel made (factor/oracle inputs excluded), the lwork-style
    workspace requirement; wall times cover the whole hypergradient
    computation including factor construction.
    """

    backend: str
    variant: str
    size: int
    median_wall_s: float
    workspace_peak_bytes: int
    workspace_total_bytes: int
    oracle_calls: int


@dataclass(frozen=True)
class BenchReport:
    cells: tuple
    repetitions: int
    warmup: int

    def __post_init__(self):
        if self.repetitions < 3:
            raise ValueError("bench repetitions must be >= 3")
        if self.warmup < 1:
            raise ValueError("bench warmup must be >= 1")

    def cell(self, backend: str, variant: str, size: int) -> BenchCell:
        for c in self.cells:
            if (c.backend, c.variant, c.size) == (backend, variant, size):
                return c
        raise KeyError(f"no bench cell ({backend}, {variant}, {size})")

    def rows(self) -> list[dict]:
        return [
            {
                "backend": c.backend,
                "variant": c.variant,
                "size": c.size,
                "median_wall_ms": fmt17(c.median_wall_s * 1e3),
                "workspace_peak_bytes": c.workspace_peak_bytes,
                "workspace_total_bytes": c.workspace_total_bytes,
                "oracle_calls": c.oracle_calls,
            }
            for c in self.cells
        ]


def _bench_cells(cfg: BenchConfig) -> list[tuple[str, str, int, IhvpConfig]]:
    cells = []
    for l in cfg.iter_sizes:
        cells.append(("cg", "iterative", l, CgIhvp(CgConfig(max_iters=l), cfg.rho)))
        cells.append(
            ("neumann", "iterative", l, NeumannIhvp(NeumannConfig(l, cfg.alpha), cfg.rho))
        )
    for k in cfg.rank_sizes:
        cells.append(("nystrom", "full", k, NystromIhvp(k=k, rho=cfg.rho)))
        cells.append(("nystrom", "rank1", k, NystromIhvp(k=k, rho=cfg.rho, kappa=1)))
    return cells


def run_bench(cfg: BenchConfig) -> BenchReport:
    """Median hypergradient wall time and solver workspace per cell,
    on one fixed weight-decay logistic-regression instance."""
    task = LogRegTask(
        LogRegTaskSpec(dim=cfg.dim, n_train=cfg.n_train, n_val=200, seed=cfg.seed)
    )
    theta = np.zeros(cfg.dim)
    phi = np.ones(cfg.dim)
    bundle = task.bundle(theta, phi)

    cells = []
    for backend, variant, size, ihvp in _bench_cells(cfg):
        for _ in range(cfg.warmup):
            hypergradient(bundle, ihvp)
        walls = []
        for _ in range(cfg.repetitions):
            start = time.perf_counter()
            hypergradient(bundle, ihvp)
            walls.append(time.perf_counter() - start)
        with track_workspace() as meter:
            _, diag = hypergradient(bundle, ihvp)
        cells.append(
            BenchCell(
                backend=backend,
                variant=variant,
                size=size,
                median_wall_s=statistics.median(walls),
                workspace_peak_bytes=meter.peak_bytes,
                workspace_total_bytes=meter.total_bytes,
                oracle_calls=diag.oracle_calls,
            )
        )
    return BenchReport(tuple(cells), cfg.repetitions, cfg.warmup)


def cmd_bench(cfg: BenchConfig, plots: bool = True, jobs: int = 1) -> int:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")

    report = run_bench(cfg)
    _write_csv(
        out / "bench.csv",
        [
            "backend",
            "variant",
            "size",
            "median_wall_ms",
            "workspace_peak_bytes",
            "workspace_total_bytes",
            "oracle_calls",
        ],
        report.rows(),
    )
    _write_json(
        out / "bench.json",
        {"repetitions": report.repetitions, "warmup": report.warmup, "cells": report.rows()},
    )
    if plots:
        plt = _pyplot()
        fig, (ax_t, ax_m) = plt.subplots(1, 2, figsize=(10, 4))
        groups: dict[tuple[str, str], list[BenchCell]] = {}
        for c in report.cells:
            groups.setdefault((c.backend, c.variant), []).append(c)
        for (backend, variant), cs in groups.items():
            cs = sorted(cs, key=lambda c: c.size)
            label = f"{backend}/{variant}"
            ax_t.plot([c.size for c in cs], [c.median_wall_s * 1e3 for c in cs], "o-", label=label)
            ax_m.plot(
                [c.size for c in cs],
                [c.workspace_peak_bytes / 1024 for c in cs],
                "o-",
                label=label,
            )
        ax_t.set_xlabel("l or k")
        ax_t.set_ylabel("median wall time (ms)")
        ax_t.legend(fontsize=8)
        ax_m.set_xlabel("l or k")
        ax_m.set_ylabel("peak solver workspace (KiB)")
        ax_m.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(out / "bench.svg")
        plt.close(fig)
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

_COMMANDS = {
    "invert-demo": cmd_invert_demo,
    "logreg": cmd_logreg,
    "quadratic-oracle": cmd_quadratic_oracle,
    "bound-check": cmd_bound_check,
    "bench": cmd_bench,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nygrad", description="Approximate-hypergradient experiments"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=str, default=None, help="JSON config file")
        p.add_argument("--output", type=str, default=None, help="output directory")
        p.add_argument(
            "--seeds", type=str, default=None, help="comma-separated seed list override"
        )
        p.add_argument("--jobs", type=int, default=1, help="parallel (config x seed) cells")
        p.add_argument("--no-plots", action="store_true", help="skip SVG plot generation")
    return parser


def _resolve_config(args) -> ExperimentConfig:
    if args.config is not None:
        cfg = load_config(args.config)
        if cfg.experiment != args.command:
            raise ConfigError(
                f"config is for experiment {cfg.experiment!r}, "
                f"but the {args.command!r} subcommand was invoked"
            )
    else:
        cfg = _CONFIG_TYPES[args.command]()
    if args.output is not None:
        cfg = replace(cfg, output_dir=args.output)
    if args.seeds is not None:
        try:
            seeds = tuple(int(s) for s in args.seeds.split(",") if s.strip())
        except ValueError as exc:
            raise ConfigError(f"bad --seeds value {args.seeds!r}") from exc
        if not seeds:
            raise ConfigError("--seeds must name at least one seed")
        if not hasattr(cfg, "seeds"):
            raise ConfigError(f"{args.command} does not take a seed list")
        cfg = replace(cfg, seeds=seeds)
    return cfg


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        return _COMMANDS[args.command](cfg, plots=not args.no_plots, jobs=args.jobs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except NygradError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
