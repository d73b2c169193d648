import numpy as np
import pytest

from nygrad import (
    DegeneratePivotError,
    DenseOperator,
    InverseApplyPlan,
    LowRankDemoSpec,
    NystromFactors,
    SamplingStrategy,
    build_factors,
    dense_regularized_inverse_apply,
    inverse_apply,
    inverse_dense,
    make_lowrank_demo,
    nystrom_error_opnorm,
    sample_indices,
    theorem1_bound,
)
from conftest import assert_close_rel, random_psd


class TestSampleIndices:
    def test_k_equals_p_covers_everything(self):
        got = sample_indices(5, 5, SamplingStrategy(seed=0))
        assert sorted(got.indices.tolist()) == [0, 1, 2, 3, 4]
        assert not got.uniform_fallback

    def test_distinct_and_repeatable(self):
        a = sample_indices(100, 5, SamplingStrategy(seed=7))
        b = sample_indices(100, 5, SamplingStrategy(seed=7))
        assert len(set(a.indices.tolist())) == 5
        assert np.array_equal(a.indices, b.indices)
        assert np.all((0 <= a.indices) & (a.indices < 100))

    def test_different_seeds_differ(self):
        a = sample_indices(1000, 10, SamplingStrategy(seed=1))
        b = sample_indices(1000, 10, SamplingStrategy(seed=2))
        assert not np.array_equal(a.indices, b.indices)

    def test_weighted_picks_heavy_index(self):
        got = sample_indices(
            4, 2, SamplingStrategy("diag-squared", seed=3), diag=np.array([0.0, 0.0, 3.0, 0.0])
        )
        assert 2 in got.indices.tolist()
        assert len(set(got.indices.tolist())) == 2
        assert not got.uniform_fallback

    def test_weighted_all_zero_falls_back(self):
        got = sample_indices(6, 3, SamplingStrategy("diag-squared", seed=0), diag=np.zeros(6))
        assert got.uniform_fallback
        assert len(set(got.indices.tolist())) == 3

    def test_weighted_requires_diag(self):
        with pytest.raises(ValueError):
            sample_indices(4, 2, SamplingStrategy("diag-squared", seed=0))

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            sample_indices(4, 5, SamplingStrategy(seed=0))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            SamplingStrategy("magic", 0)


class TestBuildFactors:
    def test_diagonal_pivot(self):
        op = DenseOperator(np.diag(np.arange(1.0, 7.0))).oracle()
        f = build_factors(op, np.array([0, 2]), rho=0.01)
        assert sorted(f.pivot_eigvals.tolist()) == [1.0, 3.0]
        expected = np.zeros((6, 2))
        expected[0, 0] = 1.0
        expected[2, 1] = 3.0
        np.testing.assert_array_equal(f.columns, expected)
        assert f.n_dropped == 0

    def test_identity_pivot(self):
        op = DenseOperator(np.eye(10)).oracle()
        f = build_factors(op, np.array([1, 4, 7]), rho=0.5)
        np.testing.assert_allclose(f.pivot_eigvals, np.ones(3), atol=1e-14)
        np.testing.assert_allclose(
            f.pivot_eigvecs @ f.pivot_eigvecs.T, np.eye(3), atol=1e-14
        )

    def test_exact_rank_reconstruction(self):
        # generic 20-column subset of an exactly rank-20 PSD 40x40 spans its range
        dense = make_lowrank_demo(LowRankDemoSpec(p=40, rank=20, rho=0.1, seed=11))
        idx = sample_indices(40, 20, SamplingStrategy(seed=5))
        f = build_factors(dense.oracle(), idx, rho=0.1)
        hk = f.reconstruct_dense()
        assert_close_rel(hk, dense.matrix, 1e-8, "rank-k reconstruction (Frobenius)")

    def test_pivot_consistency_invariant(self, rng):
        m = random_psd(rng, 30)
        op = DenseOperator(m).oracle()
        f = build_factors(op, sample_indices(30, 8, SamplingStrategy(seed=2)), rho=0.1)
        pivot = f.columns[f.indices, :]
        rebuilt = f.pivot_eigvecs @ np.diag(f.pivot_eigvals) @ f.pivot_eigvecs.T
        assert_close_rel(rebuilt, pivot, 1e-10, "pivot consistency")
        orth = f.pivot_eigvecs.T @ f.pivot_eigvecs - np.eye(f.k)
        assert np.linalg.norm(orth) <= 1e-10 * f.k

    def test_all_dropped_raises(self):
        op = DenseOperator(np.zeros((4, 4))).oracle()
        with pytest.raises(DegeneratePivotError):
            build_factors(op, np.array([0, 2]), rho=0.1)
        f = build_factors(op, np.array([0, 2]), rho=0.1, allow_degenerate=True)
        assert f.n_dropped == 2

    def test_rejects_duplicates_and_bad_args(self):
        op = DenseOperator(np.eye(5)).oracle()
        with pytest.raises(ValueError):
            build_factors(op, np.array([1, 1]), rho=0.1)
        with pytest.raises(ValueError):
            build_factors(op, np.array([0, 5]), rho=0.1)
        with pytest.raises(ValueError):
            build_factors(op, np.array([0, 1]), rho=0.0)

    def test_deterministic_bit_identical(self, rng):
        m = random_psd(rng, 25)
        op = DenseOperator(m).oracle()
        idx = sample_indices(25, 6, SamplingStrategy(seed=9))
        f1 = build_factors(op, idx, rho=0.05)
        f2 = build_factors(op, idx, rho=0.05)
        assert np.array_equal(f1.columns, f2.columns)
        assert np.array_equal(f1.pivot_eigvals, f2.pivot_eigvals)
        assert np.array_equal(f1.pivot_eigvecs, f2.pivot_eigvecs)

    def test_negative_eigenvalues_kept(self):
        m = np.diag([2.0, -1.0, 3.0])
        op = DenseOperator(m).oracle()
        f = build_factors(op, np.array([0, 1]), rho=0.1)
        assert f.n_negative_retained == 1
        assert f.n_dropped == 0


def _zero_factors(p: int, rho: float) -> NystromFactors:
    op = DenseOperator(np.zeros((p, p))).oracle()
    return build_factors(op, np.array([0]), rho=rho, allow_degenerate=True)


class TestInverseApply:
    def test_all_dropped_is_scaled_identity(self):
        f = _zero_factors(2, rho=0.1)
        for plan in (InverseApplyPlan.full(), InverseApplyPlan.rank1()):
            np.testing.assert_allclose(
                inverse_apply(f, plan, [1.0, 2.0]), [10.0, 20.0], atol=1e-12
            )

    def test_fig1_regime_matches_dense(self, rng):
        dense = make_lowrank_demo(LowRankDemoSpec(p=40, rank=20, rho=0.1, seed=0))
        f = build_factors(dense.oracle(), sample_indices(40, 20, SamplingStrategy(seed=1)), 0.1)
        for trial in range(5):
            b = rng.standard_normal(40)
            got = inverse_apply(f, InverseApplyPlan.full(), b)
            ref = dense_regularized_inverse_apply(dense, 0.1, b)
            assert_close_rel(got, ref, 1e-6, f"exact-rank inverse, trial {trial}")

    def test_three_plans_agree(self, rng):
        dense = make_lowrank_demo(LowRankDemoSpec(p=40, rank=20, rho=0.1, seed=0))
        f = build_factors(dense.oracle(), sample_indices(40, 20, SamplingStrategy(seed=1)), 0.1)
        b = rng.standard_normal(40)
        full = inverse_apply(f, InverseApplyPlan.full(), b)
        rank1 = inverse_apply(f, InverseApplyPlan.rank1(), b)
        chunk = inverse_apply(f, InverseApplyPlan.chunked(5), b)
        assert_close_rel(rank1, full, 1e-8, "rank1 vs full")
        assert_close_rel(chunk, full, 1e-8, "chunked vs full")
        assert_close_rel(chunk, rank1, 1e-8, "chunked vs rank1")

    @pytest.mark.parametrize("p,k", [(20, 4), (60, 13), (120, 31)])
    def test_kappa_equivalence_property(self, rng, p, k):
        m = random_psd(rng, p)
        op = DenseOperator(m).oracle()
        f = build_factors(op, sample_indices(p, k, SamplingStrategy(seed=p)), rho=0.01)
        b = rng.standard_normal(p)
        outs = [inverse_apply(f, InverseApplyPlan.full(), b)]
        outs.append(inverse_apply(f, InverseApplyPlan.rank1(), b))
        for kappa in range(2, k + 1):
            outs.append(inverse_apply(f, InverseApplyPlan.chunked(kappa), b))
        for i, a in enumerate(outs):
            for bb in outs[i + 1 :]:
                assert_close_rel(a, bb, 1e-8, f"kappa equivalence p={p} k={k}")

    def test_psd_monotonicity(self, rng):
        m = random_psd(rng, 35)
        op = DenseOperator(m).oracle()
        f = build_factors(op, sample_indices(35, 10, SamplingStrategy(seed=4)), rho=0.2)
        assert f.n_negative_retained == 0
        for _ in range(20):
            b = rng.standard_normal(35)
            quad = float(b @ inverse_apply(f, InverseApplyPlan.full(), b))
            assert 0.0 < quad <= (b @ b) / 0.2 + 1e-9

    def test_plan_validation(self):
        f = _zero_factors(3, rho=1.0)
        with pytest.raises(ValueError):
            InverseApplyPlan.chunked(0)
        with pytest.raises(ValueError):
            InverseApplyPlan("full", kappa=3)
        with pytest.raises(ValueError):
            InverseApplyPlan.chunked(5).resolve_kappa(1)
        with pytest.raises(ValueError):
            inverse_apply(f, InverseApplyPlan.full(), np.ones(4))

    def test_inverse_dense_matches_apply(self, rng):
        m = random_psd(rng, 18)
        op = DenseOperator(m).oracle()
        f = build_factors(op, sample_indices(18, 6, SamplingStrategy(seed=8)), rho=0.3)
        inv = inverse_dense(f)
        b = rng.standard_normal(18)
        assert_close_rel(inv @ b, inverse_apply(f, InverseApplyPlan.full(), b), 1e-12)


class TestErrorOpnorm:
    def test_exact_rank_is_zero(self):
        dense = make_lowrank_demo(LowRankDemoSpec(p=40, rank=20, rho=0.1, seed=3))
        f = build_factors(dense.oracle(), sample_indices(40, 20, SamplingStrategy(seed=6)), 0.1)
        from nygrad import operator_norm

        assert nystrom_error_opnorm(dense, f) <= 1e-8 * operator_norm(dense)

    def test_zero_column_selection(self):
        dense = DenseOperator(np.diag([5.0, 0.0, 0.0]))
        f = build_factors(dense.oracle(), np.array([1]), rho=0.1, allow_degenerate=True)
        assert nystrom_error_opnorm(dense, f) == pytest.approx(5.0, abs=1e-12)

    def test_dominates_best_rank_k(self, rng):
        m = random_psd(rng, 30)
        dense = DenseOperator(m)
        k = 10
        f = build_factors(dense.oracle(), sample_indices(30, k, SamplingStrategy(seed=1)), 0.1)
        eigs = np.sort(np.linalg.eigvalsh(m))[::-1]
        assert nystrom_error_opnorm(dense, f) >= eigs[k] - 1e-10


class TestTheorem1Bound:
    def test_zero_error(self):
        assert theorem1_bound(3.0, 2.0, 0.5, 0.0) == 0.0

    def test_unit_case(self):
        assert theorem1_bound(1.0, 1.0, 1.0, 1.0) == pytest.approx(0.5)

    def test_arithmetic(self):
        # 2 * 3 * (1/0.01) * 0.05/(0.01 + 0.05) = 500
        assert theorem1_bound(2.0, 3.0, 0.01, 0.05) == pytest.approx(500.0, rel=1e-12)

    def test_validation(self):
        with pytest.raises(ValueError):
            theorem1_bound(-1.0, 1.0, 1.0, 1.0)
        with pytest.raises(ValueError):
            theorem1_bound(1.0, 1.0, 0.0, 1.0)

    def test_monotone_in_error(self):
        bounds = [theorem1_bound(1.0, 1.0, 0.1, e) for e in (0.0, 0.01, 0.1, 1.0, 10.0)]
        assert all(a < b for a, b in zip(bounds, bounds[1:]))
        assert bounds[-1] <= 1.0 / 0.1**2  # saturates at g f / rho^2
