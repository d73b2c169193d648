import numpy as np
import pytest

from nygrad import (
    CgConfig,
    DenseOperator,
    DivergenceError,
    NeumannConfig,
    cg_solve,
    counting_oracle,
    neumann_apply,
)
from conftest import assert_close_rel, random_psd


class TestCg:
    def test_identity_one_iteration(self, rng):
        op = DenseOperator(np.eye(6)).oracle()
        b = rng.standard_normal(6)
        x, iters, res = cg_solve(op, 0.0, b, CgConfig(max_iters=10))
        np.testing.assert_allclose(x, b, atol=1e-14)
        assert iters == 1
        assert res == 0.0

    def test_exact_in_p_iterations(self, rng):
        m = random_psd(rng, 10) + 0.5 * np.eye(10)
        dense = DenseOperator(m)
        b = rng.standard_normal(10)
        x, iters, _ = cg_solve(dense.oracle(), 0.0, b, CgConfig(max_iters=10))
        ref = np.linalg.solve(m, b)
        assert_close_rel(x, ref, 1e-6, "CG after p iterations")

    @pytest.mark.parametrize("p", [10, 25, 50])
    def test_reproduces_dense_solve_at_l_equals_p(self, rng, p):
        m = random_psd(rng, p) + 0.3 * np.eye(p)
        b = rng.standard_normal(p)
        x, _, _ = cg_solve(DenseOperator(m).oracle(), 0.1, b, CgConfig(max_iters=p))
        ref = np.linalg.solve(m + 0.1 * np.eye(p), b)
        assert_close_rel(x, ref, 1e-6, f"CG exactness p={p}")

    def test_two_cluster_spectrum_not_solved_in_one_step(self, rng):
        op = DenseOperator(np.diag([1.0, 1e6])).oracle()
        b = np.array([1.0, 1.0])
        _, iters, res = cg_solve(op, 0.0, b, CgConfig(max_iters=1))
        assert iters == 1
        assert res > 0.0

    def test_early_stop_tolerance(self, rng):
        m = random_psd(rng, 30) + np.eye(30)
        b = rng.standard_normal(30)
        x, iters, res = cg_solve(
            DenseOperator(m).oracle(), 0.0, b, CgConfig(max_iters=30, residual_tol=1e-6)
        )
        assert iters < 30
        assert res <= 1e-6 * np.linalg.norm(b)

    def test_oracle_call_budget(self, rng):
        m = random_psd(rng, 12) + np.eye(12)
        op, counter = counting_oracle(DenseOperator(m).oracle())
        _, iters, _ = cg_solve(op, 0.0, rng.standard_normal(12), CgConfig(max_iters=7))
        assert iters == 7
        assert counter.calls == 7  # within the spec's l + 1 budget

    def test_breakdown_raises_divergence(self):
        op = DenseOperator(np.diag([1.0, -1.0])).oracle()
        b = np.array([1.0, 1.0])
        # p.A p = 0 on the first step: alpha is non-finite
        with pytest.raises(DivergenceError) as err:
            cg_solve(op, 0.0, b, CgConfig(max_iters=5))
        assert err.value.last_iterate is not None
        assert err.value.step == 1

    def test_config_validation(self):
        with pytest.raises(ValueError):
            CgConfig(max_iters=0)
        with pytest.raises(ValueError):
            CgConfig(max_iters=1, residual_tol=-1.0)


class TestNeumann:
    def test_identity_alpha_one(self, rng):
        op = DenseOperator(np.eye(4)).oracle()
        b = rng.standard_normal(4)
        for l in (1, 3, 17):
            got = neumann_apply(op, 0.0, b, NeumannConfig(truncation=l, alpha=1.0))
            np.testing.assert_allclose(got, b, atol=1e-14)

    def test_geometric_series_two_i(self):
        # alpha sum_{i<=l} (1 - alpha*2)^i -> 1/2 as l grows
        op = DenseOperator(2.0 * np.eye(2)).oracle()
        got = neumann_apply(op, 0.0, np.array([1.0, 0.0]), NeumannConfig(30, 0.25))
        exact = 0.25 * (1.0 - 0.5**31) / (1.0 - 0.5)
        np.testing.assert_allclose(got, [exact, 0.0], atol=1e-15)
        assert abs(got[0] - 0.5) < 1e-6

    def test_divergence_detected(self):
        op = DenseOperator(4.0 * np.eye(3)).oracle()
        with pytest.raises(DivergenceError) as err:
            neumann_apply(op, 0.0, np.ones(3), NeumannConfig(truncation=50, alpha=1.0))
        assert err.value.step is not None and err.value.step <= 50

    def test_monotone_convergence_in_l(self, rng):
        m = random_psd(rng, 20) + 0.5 * np.eye(20)
        dense = DenseOperator(m)
        b = rng.standard_normal(20)
        lam_max = float(np.linalg.eigvalsh(m).max())
        alpha = 1.5 / lam_max  # inside the alpha < 2 / lambda_max window
        ref = np.linalg.solve(m, b)
        errs = []
        for l in (5, 10, 20, 100):
            got = neumann_apply(dense.oracle(), 0.0, b, NeumannConfig(l, alpha))
            errs.append(np.linalg.norm(got - ref))
        assert all(a > b for a, b in zip(errs, errs[1:]))
        assert errs[-1] <= 1e-6 * np.linalg.norm(ref)

    def test_oracle_call_budget(self, rng):
        m = random_psd(rng, 9) + np.eye(9)
        op, counter = counting_oracle(DenseOperator(m).oracle())
        neumann_apply(op, 0.1, rng.standard_normal(9), NeumannConfig(truncation=6, alpha=0.1))
        assert counter.calls == 6

    def test_zero_rhs(self):
        op = DenseOperator(np.eye(3)).oracle()
        got = neumann_apply(op, 0.0, np.zeros(3), NeumannConfig(4, 0.5))
        np.testing.assert_array_equal(got, np.zeros(3))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            NeumannConfig(truncation=0, alpha=0.1)
        with pytest.raises(ValueError):
            NeumannConfig(truncation=1, alpha=0.0)
