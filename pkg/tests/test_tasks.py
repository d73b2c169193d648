import numpy as np
import pytest

from nygrad import (
    LogRegTask,
    LogRegTaskSpec,
    LowRankDemoSpec,
    QuadraticTask,
    QuadraticTaskSpec,
    logreg_bundle,
    make_lowrank_demo,
    operator_norm,
    quadratic_closed_form_hypergradient,
)
from conftest import assert_close_rel, central_diff_grad, central_diff_jvp


class TestLowRankDemo:
    def test_full_rank_when_rank_equals_p(self):
        dense = make_lowrank_demo(LowRankDemoSpec(p=15, rank=15, seed=4))
        assert np.linalg.eigvalsh(dense.matrix).min() > 0.0

    def test_rank_one_outer_product(self):
        spec = LowRankDemoSpec(p=12, rank=1, seed=7)
        dense = make_lowrank_demo(spec)
        g = np.random.default_rng(7).standard_normal((12, 1))
        assert operator_norm(dense) == pytest.approx(float(g[:, 0] @ g[:, 0]), rel=1e-12)

    def test_fig1_spec_has_exactly_twenty_modes(self):
        dense = make_lowrank_demo(LowRankDemoSpec())  # p=40, rank=20
        eigs = np.abs(np.linalg.eigvalsh(dense.matrix))
        assert int((eigs > 1e-8 * eigs.max()).sum()) == 20

    def test_validation(self):
        with pytest.raises(ValueError):
            LowRankDemoSpec(p=10, rank=11)
        with pytest.raises(ValueError):
            LowRankDemoSpec(rho=0.0)


@pytest.fixture(scope="module")
def logreg():
    return LogRegTask(LogRegTaskSpec(dim=12, n_train=60, n_val=50, seed=3))


@pytest.fixture(scope="module")
def quad():
    return QuadraticTask(QuadraticTaskSpec.random(9, seed=5))


class TestLogRegAnalytics:
    def test_at_origin(self, logreg):
        d = logreg.spec.dim
        theta = np.zeros(d)
        phi = np.full(d, 0.7)
        x, y = logreg.x_train, logreg.y_train
        n = x.shape[0]
        grad = logreg.inner_grad(theta, phi)
        np.testing.assert_allclose(grad, x.T @ (0.5 - y) / n, atol=1e-14)
        # Hessian at the origin is X'X/(4n) + 2 diag(phi)
        op = logreg.hvp_oracle(theta, phi)
        dense = np.column_stack([op.apply(np.eye(d)[:, i]) for i in range(d)])
        np.testing.assert_allclose(dense, x.T @ x / (4 * n) + 2 * np.diag(phi), atol=1e-12)

    def test_outer_phi_grad_identically_zero(self, logreg, rng):
        for _ in range(5):
            theta = rng.standard_normal(12)
            phi = rng.standard_normal(12)
            np.testing.assert_array_equal(
                logreg.outer_grad_phi(theta, phi), np.zeros(12)
            )

    def test_hessian_psd_for_nonnegative_phi(self, logreg, rng):
        theta = rng.standard_normal(12)
        phi = np.abs(rng.standard_normal(12))
        op = logreg.hvp_oracle(theta, phi)
        for _ in range(30):
            v = rng.standard_normal(12)
            assert v @ op.apply(v) >= 0.0

    def test_hessian_diag_matches_oracle(self, logreg, rng):
        theta = rng.standard_normal(12)
        phi = rng.standard_normal(12)
        op = logreg.hvp_oracle(theta, phi)
        diag = logreg.hessian_diag(theta, phi)
        for i in range(12):
            e = np.zeros(12)
            e[i] = 1.0
            assert diag[i] == pytest.approx(float(op.apply(e)[i]), rel=1e-12)

    def test_data_is_seed_deterministic(self):
        a = LogRegTask(LogRegTaskSpec(dim=6, n_train=20, n_val=20, seed=9))
        b = LogRegTask(LogRegTaskSpec(dim=6, n_train=20, n_val=20, seed=9))
        c = LogRegTask(LogRegTaskSpec(dim=6, n_train=20, n_val=20, seed=10))
        assert np.array_equal(a.x_train, b.x_train)
        assert np.array_equal(a.y_val, b.y_val)
        assert not np.array_equal(a.x_train, c.x_train)

    def test_labels_are_binary(self, logreg):
        assert set(np.unique(logreg.y_train)) <= {0.0, 1.0}
        assert set(np.unique(logreg.y_val)) <= {0.0, 1.0}

    def test_bundle_assembly(self, logreg, rng):
        theta = rng.standard_normal(12)
        phi = np.ones(12)
        bundle, losses = logreg_bundle(logreg, theta, phi)
        assert bundle.p == bundle.h == 12
        assert losses["train"] == pytest.approx(logreg.inner_loss(theta, phi))
        assert losses["val"] == pytest.approx(logreg.outer_loss(theta, phi))
        np.testing.assert_allclose(
            bundle.mixed_apply_transpose(np.ones(12)), 2.0 * theta, atol=1e-15
        )


class TestQuadraticAnalytics:
    def test_inner_grad_zero_at_optimum(self, quad, rng):
        phi = np.abs(rng.standard_normal(9)) + 0.1
        theta_star = quad.theta_star(phi)
        assert np.linalg.norm(quad.inner_grad(theta_star, phi)) <= 1e-8

    def test_closed_form_zero_at_outer_optimum(self, quad):
        phi = np.ones(9)
        spec = quad.spec
        on_target = QuadraticTaskSpec(
            spec.a_matrix, spec.b, quad.theta_star(phi), seed=spec.seed
        )
        h = quadratic_closed_form_hypergradient(on_target, phi)
        np.testing.assert_allclose(h, np.zeros(9), atol=1e-10)

    def test_scalar_arithmetic(self):
        spec = QuadraticTaskSpec(np.eye(1), np.ones(1), np.zeros(1))
        h = quadratic_closed_form_hypergradient(spec, np.ones(1))
        assert h[0] == pytest.approx(-0.125, rel=1e-12)

    def test_spd_validation(self):
        with pytest.raises(ValueError):
            QuadraticTaskSpec(-np.eye(3), np.ones(3), np.zeros(3))
        assert np.linalg.eigvalsh(QuadraticTaskSpec.random(14, 0).a_matrix).min() > 0

    def test_random_spec_deterministic(self):
        a = QuadraticTaskSpec.random(8, seed=3)
        b = QuadraticTaskSpec.random(8, seed=3)
        assert np.array_equal(a.a_matrix, b.a_matrix)
        assert np.array_equal(a.b, b.b)


def _fd_check_task(task, theta, phi, rng, probes, rtol=1e-5, step=1e-5):
    """Analytic first/second derivatives against central differences."""
    p = theta.shape[0]
    op = task.hvp_oracle(theta, phi)
    mixed_t = task.mixed_transpose(theta, phi)
    for _ in range(probes):
        u = rng.standard_normal(p)
        v = rng.standard_normal(p)
        # inner gradient vs loss
        fd = central_diff_grad(lambda t: task.inner_loss(t, phi), theta, v, step)
        an = float(task.inner_grad(theta, phi) @ v)
        assert abs(fd - an) <= rtol * max(abs(fd), abs(an), 1e-8)
        # Hessian-vector product vs inner gradient
        fd_h = central_diff_jvp(lambda t: task.inner_grad(t, phi), theta, v, step)
        assert_close_rel(op.apply(v), fd_h, rtol, "hvp vs finite differences")
        # mixed partial via the pairing u.(F v) = (F^T u).v
        fd_m = central_diff_jvp(lambda f: task.inner_grad(theta, f), phi, v, step)
        lhs = float(u @ fd_m)
        rhs = float(mixed_t(u) @ v)
        assert abs(lhs - rhs) <= rtol * max(abs(lhs), abs(rhs), 1e-8)
        # outer gradient vs outer loss
        fd_o = central_diff_grad(lambda t: task.outer_loss(t, phi), theta, v, step)
        an_o = float(task.outer_grad_theta(theta, phi) @ v)
        assert abs(fd_o - an_o) <= rtol * max(abs(fd_o), abs(an_o), 1e-8)


class TestFiniteDifferences:
    def test_logreg_derivatives(self, logreg, rng):
        theta = 0.3 * rng.standard_normal(12)
        phi = 0.5 + 0.2 * rng.standard_normal(12)
        _fd_check_task(logreg, theta, phi, rng, probes=25)

    def test_quadratic_derivatives(self, quad, rng):
        theta = rng.standard_normal(9)
        phi = np.ones(9) + 0.1 * rng.standard_normal(9)
        _fd_check_task(quad, theta, phi, rng, probes=25)
