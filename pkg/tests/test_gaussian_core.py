import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridckf.errors import NotPositiveDefinite, StabilizationFailed
from hybridckf.gaussian_core import (
    cholesky,
    draw_gaussian,
    ensure_spd,
    jitter_schedule,
    stabilize,
    symmetrize,
)


def _rel_frobenius(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


class TestCholesky:
    def test_identity(self):
        np.testing.assert_array_equal(cholesky(np.eye(3)), np.eye(3))

    def test_diagonal(self):
        np.testing.assert_allclose(cholesky(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]))

    def test_two_by_two(self):
        m = np.array([[4.0, 2.0], [2.0, 5.0]])
        l = cholesky(m)
        np.testing.assert_allclose(l, [[2.0, 0.0], [1.0, 2.0]], atol=1e-15)
        assert _rel_frobenius(l @ l.T, m) < 1e-12

    def test_lower_triangular_with_positive_diagonal(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((6, 6))
        l = cholesky(a @ a.T + 6 * np.eye(6))
        assert np.all(np.triu(l, 1) == 0)
        assert np.all(np.diag(l) > 0)

    @pytest.mark.parametrize("m", [np.diag([0.0, 1.0]), np.array([[1.0, 2.0], [2.0, 1.0]]), -np.eye(2)])
    def test_not_positive_definite(self, m):
        with pytest.raises(NotPositiveDefinite):
            cholesky(m)

    def test_non_finite(self):
        with pytest.raises(NotPositiveDefinite):
            cholesky(np.array([[np.nan, 0.0], [0.0, 1.0]]))

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 12), st.integers(0, 2**32 - 1))
    def test_round_trip(self, d, seed):
        rng = np.random.default_rng(seed)
        l = np.tril(rng.uniform(-1, 1, (d, d)), -1) + np.diag(rng.uniform(0.5, 2.0, d))
        recovered = cholesky(l @ l.T)
        assert _rel_frobenius(recovered, l) < 1e-10


class TestEnsureSpd:
    def test_already_spd(self):
        np.testing.assert_array_equal(ensure_spd(np.eye(2), 1e-9), np.eye(2))

    def test_first_nonzero_rung(self):
        out = ensure_spd(np.diag([0.0, 1.0]), 1e-9)
        np.testing.assert_array_equal(out, np.diag([1e-9, 1.0 + 1e-9]))

    def test_schedule(self):
        sched = jitter_schedule(1e-9)
        assert sched[0] == 0.0
        assert len(sched) == 8
        np.testing.assert_allclose(sched[1:], [1e-9 * 10**i for i in range(7)])

    def test_indefinite_beyond_schedule_fails(self):
        # eigenvalue -1 needs a load > 1, the default schedule stops at 1e-3
        with pytest.raises(StabilizationFailed):
            ensure_spd(np.array([[1.0, 2.0], [2.0, 1.0]]), 1e-9)

    def test_indefinite_within_schedule(self):
        out = ensure_spd(np.array([[1.0, 2.0], [2.0, 1.0]]), 1e-5)
        assert np.linalg.eigvalsh(out).min() > 0

    def test_symmetrizes(self):
        m = np.array([[2.0, 1.0], [0.0, 2.0]])
        out = ensure_spd(m, 1e-9)
        np.testing.assert_array_equal(out, out.T)
        np.testing.assert_allclose(out, [[2.0, 0.5], [0.5, 2.0]])

    def test_rung_reported(self):
        _, factor, rung = stabilize(np.diag([0.0, 1.0]), 1e-9)
        assert rung == 1
        np.testing.assert_allclose(factor @ factor.T, np.diag([1e-9, 1 + 1e-9]))

    def test_bad_base(self):
        with pytest.raises(ValueError):
            ensure_spd(np.eye(2), 0.0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 2**32 - 1))
    def test_output_always_factorizes(self, d, seed):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((d, d))
        # PSD but possibly rank deficient
        m = a[:, : max(1, d // 2)] @ a[:, : max(1, d // 2)].T
        cholesky(ensure_spd(m, 1e-9))

    def test_symmetrize_is_exact(self):
        rng = np.random.default_rng(0)
        s = symmetrize(rng.standard_normal((5, 5)))
        assert np.array_equal(s, s.T)


class TestDrawGaussian:
    def test_zero_variance(self):
        assert draw_gaussian([5.0], [0.0], seed=123).tolist() == [5.0]

    def test_deterministic(self):
        a = draw_gaussian(np.zeros(4), np.ones(4), seed=7)
        b = draw_gaussian(np.zeros(4), np.ones(4), seed=7)
        np.testing.assert_array_equal(a, b)

    def test_moments(self):
        x = draw_gaussian(np.zeros(100_000), np.full(100_000, 4.0), seed=11)
        assert abs(x.mean()) < 0.05
        assert abs(x.var() - 4.0) < 0.15

    def test_disjoint_seeds_uncorrelated(self):
        n = 100_000
        a = draw_gaussian(np.zeros(n), np.ones(n), seed=1)
        b = draw_gaussian(np.zeros(n), np.ones(n), seed=2)
        assert abs(np.corrcoef(a, b)[0, 1]) < 0.02

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            draw_gaussian([0.0, 1.0], [1.0], seed=0)
