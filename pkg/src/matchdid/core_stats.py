"""Numerical primitives: distributions, small linear algebra, ranks, OLS.

Everything here is pure and reentrant. Random draws go through
:class:`RngStream`, which maps a ``(seed, stream_id)`` pair to an
independent PCG64 generator via numpy's ``SeedSequence`` spawn keys, so a
replication can be reproduced without replaying the ones before it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy import special, stats
from scipy.linalg import solve_triangular

from .errors import DecompositionError, DomainError, SingularityError

MAD_SCALE = 1.4826
_SQRT2 = math.sqrt(2.0)
_SQRT2PI = math.sqrt(2.0 * math.pi)
_UINT64 = (1 << 64) - 1


# --------------------------------------------------------------------------
# distributions


def std_normal_cdf(x):
    """Standard normal CDF, scalar or elementwise over an array."""
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise DomainError("std_normal_cdf requires finite input")
    out = 0.5 * special.erfc(-arr / _SQRT2)
    return float(out) if out.ndim == 0 else out


def std_normal_pdf(x):
    arr = np.asarray(x, dtype=float)
    out = np.exp(-0.5 * arr * arr) / _SQRT2PI
    return float(out) if out.ndim == 0 else out


# Acklam's rational approximation, used only as the starting point for
# Halley refinement against the erfc-based CDF.
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def _acklam(p: float) -> float:
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        return (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    if p > 1.0 - _P_LOW:
        q = math.sqrt(-2.0 * math.log1p(-p))
        return -(((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    q = p - 0.5
    r = q * q
    return (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
        (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0)


def std_normal_quantile(p: float) -> float:
    """Inverse of :func:`std_normal_cdf` for ``0 < p < 1``."""
    p = float(p)
    if not (0.0 < p < 1.0):
        raise DomainError(f"probability must lie in (0, 1), got {p}")
    if p == 0.5:
        return 0.0
    if p > 0.5:
        # 1 - p is exact here; refining in the lower tail keeps full relative accuracy
        return -std_normal_quantile(1.0 - p)
    x = _acklam(p)
    for _ in range(3):
        err = 0.5 * math.erfc(-x / _SQRT2) - p
        u = err * _SQRT2PI * math.exp(0.5 * x * x)
        x -= u / (1.0 + 0.5 * x * u)
    return x


def _t_upper_tail(t: float, df: float) -> float:
    # P(T > t) for t >= 0 via the regularized incomplete beta function
    return 0.5 * special.betainc(0.5 * df, 0.5, df / (df + t * t))


def _t_pdf(t: float, df: float) -> float:
    logc = math.lgamma(0.5 * (df + 1.0)) - math.lgamma(0.5 * df) - 0.5 * math.log(df * math.pi)
    return math.exp(logc - 0.5 * (df + 1.0) * math.log1p(t * t / df))


def student_t_cdf(t: float, df: float) -> float:
    t = float(t)
    if not math.isfinite(t) or not df > 0:
        raise DomainError(f"invalid arguments t={t}, df={df}")
    tail = _t_upper_tail(abs(t), df)
    return 1.0 - tail if t > 0 else tail


def student_t_sf_two_sided(t: float, df: float) -> float:
    """Two-sided p-value ``P(|T| >= |t|)``."""
    return min(1.0, 2.0 * _t_upper_tail(abs(float(t)), df))


def student_t_quantile(p: float, df: float) -> float:
    """p-quantile of Student's t with ``df`` degrees of freedom.

    Solves ``P(T > t) = 1 - p`` on the upper half-line with a bracketed
    Newton iteration (bisection whenever a Newton step leaves the bracket).
    """
    p = float(p)
    if not (0.0 < p < 1.0):
        raise DomainError(f"probability must lie in (0, 1), got {p}")
    if not (df >= 1 and math.isfinite(df)):
        raise DomainError(f"degrees of freedom must be >= 1, got {df}")
    if p == 0.5:
        return 0.0
    if p < 0.5:
        return -student_t_quantile(1.0 - p, df)
    target = 1.0 - p

    lo, hi = 0.0, max(1.0, std_normal_quantile(p))
    while _t_upper_tail(hi, df) > target:
        lo, hi = hi, 2.0 * hi
        if hi > 1e300:
            raise DomainError("t quantile search diverged")
    x = 0.5 * (lo + hi)
    for _ in range(200):
        f = _t_upper_tail(x, df) - target
        if f > 0:
            lo = x
        else:
            hi = x
        step = f / _t_pdf(x, df)
        x_new = x + step
        if not (lo < x_new < hi):
            x_new = 0.5 * (lo + hi)
        if abs(x_new - x) <= 1e-15 * max(1.0, abs(x)):
            return x_new
        x = x_new
    return x


# --------------------------------------------------------------------------
# linear algebra


def _as_matrix(a, name: str = "matrix") -> np.ndarray:
    m = np.asarray(a, dtype=float)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise DomainError(f"{name} must be a non-empty 2-D array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise DomainError(f"{name} has non-finite entries")
    return m


def cholesky_lower(spd) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T == spd``.

    Raises:
        DecompositionError: if ``spd`` is not symmetric or a pivot is <= 0.
    """
    a = _as_matrix(spd, "spd")
    d = a.shape[0]
    if a.shape[1] != d:
        raise DecompositionError(f"matrix must be square, got shape {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a))))
    if not np.allclose(a, a.T, rtol=0.0, atol=1e-12 * scale):
        raise DecompositionError("matrix is not symmetric")
    L = np.zeros_like(a)
    for j in range(d):
        pivot = a[j, j] - L[j, :j] @ L[j, :j]
        if pivot <= 0.0:
            raise DecompositionError(f"matrix is not positive definite (pivot {j} = {pivot:.3g})")
        L[j, j] = math.sqrt(pivot)
        L[j + 1:, j] = (a[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]
    return L


def equicorrelation_matrix(d: int, rho: float) -> np.ndarray:
    """Unit diagonal, common off-diagonal ``rho``."""
    if d < 1:
        raise DomainError("dimension must be >= 1")
    lower = -1.0 / (d - 1) if d > 1 else -math.inf
    if d > 1 and not (lower < rho < 1.0):
        raise DomainError(f"rho={rho} outside the positive-definite range ({lower:.4g}, 1)")
    m = np.full((d, d), float(rho))
    np.fill_diagonal(m, 1.0)
    return m


# --------------------------------------------------------------------------
# randomness


@dataclass(frozen=True)
class RngStream:
    """Independent random stream identified by ``(seed, stream_id)``.

    ``substream`` appends further spawn-key components, used e.g. for
    regenerating a degenerate draw without touching other replications.
    """

    seed: int
    stream_id: int = 0
    path: tuple = ()

    def substream(self, *keys: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id, self.path + tuple(int(k) for k in keys))

    def generator(self) -> np.random.Generator:
        if self.stream_id < 0 or any(k < 0 for k in self.path):
            raise DomainError("stream ids must be non-negative")
        ss = np.random.SeedSequence(int(self.seed) & _UINT64,
                                    spawn_key=(int(self.stream_id),) + self.path)
        return np.random.Generator(np.random.PCG64(ss))


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"expected RngStream or numpy Generator, got {type(rng).__name__}")


def mvn_sample(rng, mean: Sequence[float], cov, n: int) -> np.ndarray:
    """Draw ``n`` rows from ``N(mean, cov)`` through the Cholesky factor."""
    mean = np.asarray(mean, dtype=float)
    L = cholesky_lower(cov)
    if mean.shape != (L.shape[0],):
        raise DomainError(f"mean has shape {mean.shape}, covariance is {L.shape}")
    gen = as_generator(rng)
    return gen.standard_normal((int(n), L.shape[0])) @ L.T + mean


# --------------------------------------------------------------------------
# ranks, regression, summaries


def rank_transform(columns) -> np.ndarray:
    """Average ranks (1-based) within each column; 1-D input is one column."""
    arr = np.asarray(columns, dtype=float)
    if arr.ndim not in (1, 2) or arr.shape[0] < 1:
        raise DomainError(f"expected a non-empty vector or matrix, got shape {arr.shape}")
    return stats.rankdata(arr, method="average", axis=0).astype(float)


@dataclass(frozen=True)
class OlsFit:
    coefficients: np.ndarray
    standard_errors: np.ndarray
    residual_df: int
    residual_variance: float
    residuals: np.ndarray

    def t_statistic(self, j: int) -> float:
        return float(self.coefficients[j] / self.standard_errors[j])


def ols_fit(design, response, column_names: Sequence[str] | None = None,
            absorbed_df: int = 0) -> OlsFit:
    """Ordinary least squares by Householder QR with classical standard errors.

    Args:
        design: ``n x p`` design matrix (include an intercept column yourself).
        response: length-``n`` response.
        column_names: used only in error messages.
        absorbed_df: parameters already swept out of the data (e.g. unit
            fixed effects removed by demeaning); subtracted from the
            residual degrees of freedom.

    Raises:
        SingularityError: if the design is rank deficient. The first column
            found to be dependent on the preceding ones is named.
    """
    X = _as_matrix(design, "design")
    y = np.asarray(response, dtype=float)
    n, p = X.shape
    if y.shape != (n,):
        raise DomainError(f"response has shape {y.shape}, expected ({n},)")
    names = list(column_names) if column_names is not None else [f"x{j}" for j in range(p)]
    df = n - p - int(absorbed_df)
    if df < 1:
        raise DomainError(f"need at least one residual degree of freedom (n={n}, p={p}, absorbed={absorbed_df})")

    Q, R = np.linalg.qr(X, mode="reduced")
    diag = np.abs(np.diag(R))
    tol = 1e-10 * diag.max() if diag.size else 0.0
    bad = np.flatnonzero(diag <= tol)
    if bad.size:
        raise SingularityError(
            f"design is rank deficient; column {names[bad[0]]!r} is collinear with earlier columns",
            columns=[names[j] for j in bad],
        )
    coef = solve_triangular(R, Q.T @ y)
    resid = y - X @ coef
    s2 = float(resid @ resid) / df
    r_inv = solve_triangular(R, np.eye(p))
    se = np.sqrt(s2 * np.sum(r_inv * r_inv, axis=1))
    return OlsFit(coef, se, df, s2, resid)


class SummaryStats(NamedTuple):
    mean: float
    sd: float
    median: float
    mad_scaled: float


def summary_stats(values) -> SummaryStats:
    """Mean, unbiased SD, median and normal-consistent MAD (x 1.4826)."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size < 2:
        raise DomainError("summary_stats needs at least two values")
    med = float(np.median(v))
    return SummaryStats(
        mean=float(np.mean(v)),
        sd=float(np.std(v, ddof=1)),
        median=med,
        mad_scaled=MAD_SCALE * float(np.median(np.abs(v - med))),
    )
