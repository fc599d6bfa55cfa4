import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from matchdid.core_stats import (
    MAD_SCALE,
    RngStream,
    cholesky_lower,
    equicorrelation_matrix,
    mvn_sample,
    ols_fit,
    rank_transform,
    std_normal_cdf,
    std_normal_pdf,
    std_normal_quantile,
    student_t_cdf,
    student_t_quantile,
    student_t_sf_two_sided,
    summary_stats,
)
from matchdid.errors import DecompositionError, DomainError, SingularityError

mpmath.mp.dps = 40


def mp_normal_cdf(x):
    return float(mpmath.ncdf(x))


def mp_t_cdf(t, df):
    """t CDF through the regularized incomplete beta at 40 digits."""
    t, df = mpmath.mpf(t), mpmath.mpf(df)
    tail = mpmath.betainc(df / 2, mpmath.mpf(1) / 2, 0, df / (df + t * t), regularized=True) / 2
    return tail if t < 0 else 1 - tail


def mp_t_quantile(p, df):
    """Plain bisection on the 40-digit CDF; slow but assumption-free."""
    lo, hi = mpmath.mpf(-1e5), mpmath.mpf(1e5)
    for _ in range(120):
        mid = (lo + hi) / 2
        if mp_t_cdf(mid, df) < p:
            lo = mid
        else:
            hi = mid
    return float((lo + hi) / 2)


# -------------------------------------------------------------- normal


class TestNormal:
    def test_zero(self):
        assert std_normal_cdf(0.0) == 0.5

    def test_saturates(self):
        assert abs(std_normal_cdf(40.0) - 1.0) < 1e-15
        assert std_normal_cdf(-40.0) >= 0.0

    def test_known_point(self):
        assert abs(std_normal_cdf(1.959964) - 0.975) < 1e-6

    @pytest.mark.parametrize("x", [-8.0, -3.3, -1.0, -0.1, 0.4, 1.7, 5.5])
    def test_against_mpmath(self, x):
        assert std_normal_cdf(x) == pytest.approx(mp_normal_cdf(x), rel=1e-13, abs=1e-300)

    def test_vectorized(self):
        out = std_normal_cdf(np.array([-1.0, 0.0, 1.0]))
        assert out.shape == (3,)
        assert out[0] + out[2] == pytest.approx(1.0, abs=1e-15)

    def test_pdf(self):
        assert std_normal_pdf(0.0) == pytest.approx(1 / math.sqrt(2 * math.pi))

    def test_nonfinite_rejected(self):
        with pytest.raises(DomainError):
            std_normal_cdf(float("nan"))

    def test_quantile_median(self):
        assert std_normal_quantile(0.5) == 0.0

    def test_quantile_975(self):
        # bisection on the high-precision CDF as the oracle
        oracle = float(mpmath.findroot(lambda x: mpmath.ncdf(x) - mpmath.mpf("0.975"), (1.0, 3.0), solver="bisect"))
        assert abs(std_normal_quantile(0.975) - oracle) < 1e-12
        assert abs(std_normal_quantile(0.975) - 1.959964) < 1e-6

    @pytest.mark.parametrize("p", [1e-300, 1e-12, 1e-4, 0.02, 0.3, 0.7, 0.98, 1 - 1e-10])
    def test_quantile_against_mpmath(self, p):
        with mpmath.workdps(400):  # keep 2p - 1 exact for tiny p
            oracle = float(mpmath.sqrt(2) * mpmath.erfinv(2 * mpmath.mpf(p) - 1))
        assert std_normal_quantile(p) == pytest.approx(oracle, rel=1e-12)

    @pytest.mark.parametrize("x", [-3, -2, -1, 0, 1, 2, 3])
    def test_round_trip_grid(self, x):
        assert abs(std_normal_quantile(std_normal_cdf(x)) - x) < 1e-8

    @pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5, float("nan")])
    def test_quantile_domain(self, p):
        with pytest.raises(DomainError):
            std_normal_quantile(p)

    @given(st.floats(min_value=-5.0, max_value=5.0))
    def test_round_trip_property(self, x):
        assert abs(std_normal_quantile(std_normal_cdf(x)) - x) < 1e-8

    @given(st.floats(min_value=-37.0, max_value=0.0))
    def test_round_trip_lower_tail(self, x):
        # lower-tail probabilities keep full relative precision all the way out
        assert std_normal_quantile(std_normal_cdf(x)) == pytest.approx(x, rel=1e-12, abs=1e-12)

    @given(st.floats(min_value=-30, max_value=30), st.floats(min_value=-30, max_value=30))
    def test_cdf_monotone(self, a, b):
        lo, hi = min(a, b), max(a, b)
        assert std_normal_cdf(lo) <= std_normal_cdf(hi)


# -------------------------------------------------------------- Student t


class TestStudentT:
    def test_median(self):
        for df in (1, 3, 31, 1000):
            assert student_t_quantile(0.5, df) == 0.0

    def test_df31(self):
        assert abs(student_t_quantile(0.975, 31) - 2.039513) < 1e-5
        assert student_t_quantile(0.975, 31) == pytest.approx(mp_t_quantile(0.975, 31), abs=1e-10)

    def test_normal_limit(self):
        assert abs(student_t_quantile(0.975, 10**6) - std_normal_quantile(0.975)) < 1e-3

    @pytest.mark.parametrize("df", [1, 2, 5, 31, 398])
    @pytest.mark.parametrize("p", [0.001, 0.05, 0.8, 0.975, 0.9995])
    def test_quantile_against_mpmath(self, p, df):
        assert student_t_quantile(p, df) == pytest.approx(mp_t_quantile(p, df), rel=1e-9, abs=1e-10)

    def test_cauchy_closed_form(self):
        assert student_t_quantile(0.75, 1) == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("t,df", [(-2.5, 4), (0.3, 12), (1.96, 100), (8.0, 3)])
    def test_cdf_against_mpmath(self, t, df):
        assert student_t_cdf(t, df) == pytest.approx(float(mp_t_cdf(t, df)), rel=1e-12)

    def test_two_sided(self):
        assert student_t_sf_two_sided(0.0, 7) == pytest.approx(1.0)
        q = student_t_quantile(0.975, 9)
        assert student_t_sf_two_sided(q, 9) == pytest.approx(0.05, abs=1e-12)
        assert student_t_sf_two_sided(-q, 9) == pytest.approx(0.05, abs=1e-12)

    @pytest.mark.parametrize("df", [0, -1, float("nan")])
    def test_bad_df(self, df):
        with pytest.raises(DomainError):
            student_t_quantile(0.9, df)

    @settings(max_examples=60)
    @given(st.floats(min_value=1e-6, max_value=1 - 1e-6), st.integers(min_value=1, max_value=500))
    def test_round_trip(self, p, df):
        assert student_t_cdf(student_t_quantile(p, df), df) == pytest.approx(p, rel=1e-8, abs=1e-12)

    @given(st.floats(min_value=0.5, max_value=0.999), st.integers(min_value=1, max_value=200))
    def test_symmetry(self, p, df):
        assert student_t_quantile(1 - p, df) == pytest.approx(-student_t_quantile(p, df), rel=1e-9, abs=1e-12)


# -------------------------------------------------------------- matrices


class TestCholesky:
    def test_identity(self):
        np.testing.assert_array_equal(cholesky_lower(np.eye(3)), np.eye(3))

    def test_equicorrelation_2(self):
        L = cholesky_lower(equicorrelation_matrix(2, 0.2))
        np.testing.assert_allclose(L, [[1.0, 0.0], [0.2, math.sqrt(0.96)]], atol=1e-12)
        assert abs(L[1, 1] - 0.979796) < 1e-6

    def test_not_pd(self):
        with pytest.raises(DecompositionError):
            cholesky_lower([[1.0, 2.0], [2.0, 1.0]])

    def test_asymmetric(self):
        with pytest.raises(DecompositionError):
            cholesky_lower([[1.0, 0.5], [0.0, 1.0]])

    @settings(max_examples=50)
    @given(st.integers(min_value=1, max_value=8), st.integers(min_value=0, max_value=2**32 - 1))
    def test_reconstruction(self, d, seed):
        g = np.random.default_rng(seed)
        a = g.standard_normal((d, d))
        spd = a @ a.T + d * np.eye(d)
        L = cholesky_lower(spd)
        assert np.allclose(np.triu(L, 1), 0.0)
        assert np.max(np.abs(L @ L.T - spd)) < 1e-10 * max(1.0, np.abs(spd).max())


class TestEquicorrelation:
    def test_one(self):
        np.testing.assert_array_equal(equicorrelation_matrix(1, 0.7), [[1.0]])

    def test_three(self):
        m = equicorrelation_matrix(3, 0.2)
        np.testing.assert_array_equal(np.diag(m), 1.0)
        assert np.all(m[~np.eye(3, dtype=bool)] == 0.2)

    def test_zero_is_identity(self):
        np.testing.assert_array_equal(equicorrelation_matrix(4, 0.0), np.eye(4))

    @pytest.mark.parametrize("d,rho", [(3, -0.5), (2, 1.0), (0, 0.1)])
    def test_invalid(self, d, rho):
        with pytest.raises(DomainError):
            equicorrelation_matrix(d, rho)


# -------------------------------------------------------------- randomness


class TestRandom:
    def test_mean(self):
        x = mvn_sample(RngStream(1), np.zeros(3), np.eye(3), 100_000)
        assert x.shape == (100_000, 3)
        assert np.all(np.abs(x.mean(axis=0)) < 0.02)

    def test_correlation(self):
        x = mvn_sample(RngStream(2), [1.0, 1.0], equicorrelation_matrix(2, 0.2), 100_000)
        assert abs(np.corrcoef(x.T)[0, 1] - 0.2) < 0.01
        assert np.all(np.abs(x.mean(axis=0) - 1.0) < 0.02)

    def test_deterministic(self):
        a = mvn_sample(RngStream(5, 3), [0, 0], np.eye(2), 50)
        b = mvn_sample(RngStream(5, 3), [0, 0], np.eye(2), 50)
        np.testing.assert_array_equal(a, b)

    def test_streams_differ(self):
        a = RngStream(5, 3).generator().random(4)
        b = RngStream(5, 4).generator().random(4)
        c = RngStream(5, 3).substream(1).generator().random(4)
        assert not np.array_equal(a, b)
        assert not np.array_equal(a, c)


# -------------------------------------------------------------- ranks


class TestRanks:
    def test_simple(self):
        np.testing.assert_array_equal(rank_transform([3.1, 1.0, 2.5]).ravel(), [3, 1, 2])

    def test_ties(self):
        np.testing.assert_array_equal(rank_transform([5, 5, 1]).ravel(), [2.5, 2.5, 1])

    def test_columnwise(self):
        r = rank_transform(np.array([[1.0, 9.0], [2.0, 8.0], [3.0, 7.0]]))
        np.testing.assert_array_equal(r, [[1, 3], [2, 2], [3, 1]])

    @given(st.lists(st.integers(min_value=-40, max_value=40), min_size=1, max_size=30))
    def test_monotone_invariance(self, xs):
        x = np.array(xs)
        np.testing.assert_array_equal(rank_transform(np.exp(x)), rank_transform(x))

    @given(st.lists(st.integers(min_value=0, max_value=5), min_size=1, max_size=25))
    def test_rank_sum(self, xs):
        n = len(xs)
        assert rank_transform(xs).sum() == pytest.approx(n * (n + 1) / 2)


# -------------------------------------------------------------- OLS


class TestOls:
    def test_exact_line(self):
        x = np.arange(10.0)
        fit = ols_fit(np.column_stack([np.ones(10), x]), 3.0 - 2.0 * x)
        np.testing.assert_allclose(fit.coefficients, [3.0, -2.0], atol=1e-12)
        assert fit.residual_variance < 1e-25
        assert fit.residual_df == 8

    def test_intercept_only(self):
        y = np.array([2.0, 4.0, 9.0, 1.0, 3.0])
        fit = ols_fit(np.ones((5, 1)), y)
        assert fit.coefficients[0] == pytest.approx(y.mean())
        assert fit.standard_errors[0] == pytest.approx(y.std(ddof=1) / math.sqrt(5))

    def test_against_normal_equations(self):
        g = np.random.default_rng(0)
        X = np.column_stack([np.ones(50), g.standard_normal((50, 3))])
        y = X @ [1.0, 2.0, -1.0, 0.5] + g.standard_normal(50)
        fit = ols_fit(X, y)
        beta = np.linalg.solve(X.T @ X, X.T @ y)
        resid = y - X @ beta
        s2 = resid @ resid / 46
        se = np.sqrt(s2 * np.diag(np.linalg.inv(X.T @ X)))
        np.testing.assert_allclose(fit.coefficients, beta, rtol=1e-10)
        np.testing.assert_allclose(fit.standard_errors, se, rtol=1e-10)
        assert fit.t_statistic(1) == pytest.approx(beta[1] / se[1])

    def test_absorbed_df(self):
        X = np.column_stack([np.ones(6), np.arange(6.0)])
        assert ols_fit(X, np.arange(6.0) ** 2, absorbed_df=2).residual_df == 2

    def test_singular_names_column(self):
        x = np.arange(5.0)
        with pytest.raises(SingularityError) as err:
            ols_fit(np.column_stack([np.ones(5), x, 2 * x]), x, ["const", "x", "twice_x"])
        assert "twice_x" in str(err.value)
        assert list(err.value.columns) == ["twice_x"]

    def test_too_few_rows(self):
        with pytest.raises(DomainError):
            ols_fit(np.ones((1, 1)), [1.0])


# -------------------------------------------------------------- summaries


class TestSummary:
    def test_constant(self):
        s = summary_stats([1, 1, 1])
        assert (s.mean, s.sd, s.mad_scaled) == (1.0, 0.0, 0.0)

    def test_hand(self):
        s = summary_stats([0, 1, 2, 3, 4])
        assert s.mean == 2.0 and s.median == 2.0
        assert s.sd == pytest.approx(math.sqrt(2.5))
        assert s.mad_scaled == pytest.approx(MAD_SCALE * 1.0)

    def test_normal_mad_matches_sd(self):
        v = np.random.default_rng(3).normal(2.0, 0.4, 100_000)
        s = summary_stats(v)
        assert abs(s.mad_scaled / s.sd - 1) < 0.05

    def test_too_short(self):
        with pytest.raises(DomainError):
            summary_stats([1.0])
