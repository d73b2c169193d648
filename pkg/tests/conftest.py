"""Shared helpers: independent oracles used to freeze expected values."""

from __future__ import annotations

import numpy as np
import pytest


def random_psd(rng: np.random.Generator, p: int, rank: int | None = None) -> np.ndarray:
    """Gram-matrix PSD instance; full rank unless ``rank`` is given."""
    r = p if rank is None else rank
    g = rng.standard_normal((p, r))
    m = g @ g.T / max(p, 1)
    return (m + m.T) / 2.0


def power_iteration_norm(a: np.ndarray, iters: int = 5000, seed: int = 123) -> float:
    """Spectral-norm oracle independent of LAPACK: power iteration on A^T A."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(a.shape[1])
    v /= np.linalg.norm(v)
    for _ in range(iters):
        w = a.T @ (a @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
    return float(np.sqrt(v @ (a.T @ (a @ v))))


def central_diff_grad(f, x: np.ndarray, direction: np.ndarray, step: float = 1e-5) -> float:
    """Directional derivative of scalar f at x along ``direction``."""
    return (f(x + step * direction) - f(x - step * direction)) / (2.0 * step)


def central_diff_jvp(g, x: np.ndarray, direction: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Directional derivative of vector-valued g at x along ``direction``."""
    return (g(x + step * direction) - g(x - step * direction)) / (2.0 * step)


def assert_close_rel(actual, expected, rtol, context=""):
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    scale = max(float(np.linalg.norm(expected)), 1e-300)
    err = float(np.linalg.norm(actual - expected)) / scale
    assert err <= rtol, f"{context}: relative error {err:.3e} > {rtol:.1e}"


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


#: filled by test_acceptance; one line per acceptance criterion
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
