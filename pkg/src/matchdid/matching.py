"""Construction of closely matched control groups.

The workflow mirrors the usual optimal-matching recipe for observational
studies: fit a logistic propensity model, build a rank-based Mahalanobis
distance between every treated and control unit, add a penalty for pairs
whose logit propensity scores differ by more than the caliper, and solve the
resulting min-cost assignment exactly. Outcome-based distances are provided
for demonstrating regression-to-the-mean bias.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np
from scipy.linalg import solve_triangular
from scipy.spatial.distance import cdist
from scipy.special import expit

from .core_stats import cholesky_lower, rank_transform
from .errors import DecompositionError, DomainError, InfeasibleError, SingularityError

CALIPER_SD_MULTIPLIER = 0.2
RIDGE_LAMBDA = 1e-4
DEFAULT_PENALTY_MULTIPLIER = 1000.0
METRICS = ("rank-mahalanobis", "propensity")


@dataclass(frozen=True)
class CovariateSample:
    """Units x covariates with a treatment flag per unit."""

    unit_ids: np.ndarray
    treated: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple

    def __post_init__(self):
        z = np.asarray(self.covariates, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        w = np.asarray(self.treated).astype(bool)
        ids = np.asarray(self.unit_ids)
        names = tuple(str(s) for s in self.covariate_names)
        if z.ndim != 2 or z.shape[0] != w.shape[0] or ids.shape[0] != w.shape[0]:
            raise DomainError("unit_ids, treated and covariates must have matching lengths")
        if len(names) != z.shape[1]:
            raise DomainError(f"{len(names)} covariate names for {z.shape[1]} columns")
        if not np.all(np.isfinite(z)):
            raise DomainError("covariates contain missing or non-finite entries")
        if len(set(ids.tolist())) != ids.shape[0]:
            raise DomainError("unit ids must be unique")
        object.__setattr__(self, "covariates", z)
        object.__setattr__(self, "treated", w)
        object.__setattr__(self, "unit_ids", ids)
        object.__setattr__(self, "covariate_names", names)

    @classmethod
    def from_arrays(cls, covariates, treated, unit_ids=None, covariate_names=None):
        z = np.asarray(covariates, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        if unit_ids is None:
            unit_ids = np.arange(z.shape[0])
        if covariate_names is None:
            covariate_names = [f"z{j + 1}" for j in range(z.shape[1])]
        return cls(np.asarray(unit_ids), np.asarray(treated), z, tuple(covariate_names))

    @property
    def n(self) -> int:
        return int(self.treated.shape[0])

    @property
    def treated_index(self) -> np.ndarray:
        return np.flatnonzero(self.treated)

    @property
    def control_index(self) -> np.ndarray:
        return np.flatnonzero(~self.treated)

    @property
    def n_treated(self) -> int:
        return int(self.treated.sum())

    @property
    def n_control(self) -> int:
        return self.n - self.n_treated

    def select(self, columns) -> "CovariateSample":
        """Restrict to a subset of covariates, given by index or name."""
        idx = [self.covariate_names.index(c) if isinstance(c, str) else int(c) for c in columns]
        if not idx:
            raise DomainError("need at least one covariate")
        return CovariateSample(self.unit_ids, self.treated, self.covariates[:, idx],
                               tuple(self.covariate_names[j] for j in idx))


@dataclass(frozen=True)
class PropensityModel:
    coefficients: np.ndarray
    logit_scores: np.ndarray
    caliper_width: float
    treated: np.ndarray
    penalized: bool = False
    iterations: int = 0

    @property
    def treated_logits(self) -> np.ndarray:
        return self.logit_scores[self.treated]

    @property
    def control_logits(self) -> np.ndarray:
        return self.logit_scores[~self.treated]

    @property
    def fitted_probabilities(self) -> np.ndarray:
        return expit(self.logit_scores)


@dataclass(frozen=True)
class PairAssignment:
    """Optimal assignment of ``k`` distinct controls to each treated unit.

    Indices are positions among the treated units (rows of the distance
    matrix) and among the controls (columns). ``treated_ids`` and
    ``control_ids`` translate them back to unit identifiers.
    """

    pairs: tuple
    total_distance: float
    controls_per_treated: int
    pair_distances: tuple = ()
    treated_ids: tuple | None = None
    control_ids: tuple | None = None

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)

    @property
    def treated_indices(self) -> np.ndarray:
        return np.array([t for t, _ in self.pairs], dtype=int)

    @property
    def control_indices(self) -> np.ndarray:
        """Matched controls; for ``k == 1`` aligned with :attr:`treated_indices`."""
        return np.array([c for _, cs in self.pairs for c in cs], dtype=int)

    def id_pairs(self) -> list:
        """``(treated_id, control_id, distance)`` triples, one per matched control."""
        tids = self.treated_ids
        cids = self.control_ids
        out = []
        for (t, cs), ds in zip(self.pairs, self.pair_distances or [(math.nan,) * self.controls_per_treated] * len(self.pairs)):
            for c, dist in zip(cs, ds):
                out.append((t if tids is None else tids[t], c if cids is None else cids[c], dist))
        return out


@dataclass(frozen=True)
class BalanceRow:
    covariate: str
    treated_mean: float
    all_controls_mean: float
    matched_controls_mean: float
    std_diff_before: float
    std_diff_after: float


@dataclass(frozen=True)
class BalanceTable:
    rows: tuple = field(default_factory=tuple)

    def __iter__(self):
        return iter(self.rows)

    def __len__(self):
        return len(self.rows)

    def __getitem__(self, key):
        if isinstance(key, str):
            for row in self.rows:
                if row.covariate == key:
                    return row
            raise KeyError(key)
        return self.rows[key]


# --------------------------------------------------------------------------
# propensity model


def _dependent_columns(X: np.ndarray, names: Sequence[str]) -> list:
    _, R = np.linalg.qr(X, mode="reduced")
    diag = np.abs(np.diag(R))
    tol = 1e-10 * max(diag.max(), 1e-300)
    return [names[j] for j in np.flatnonzero(diag <= tol)]


def _irls(X, y, ridge, max_iter, tol):
    n, p = X.shape
    pen = np.full(p, ridge)
    pen[0] = 0.0  # intercept is never penalized
    beta = np.zeros(p)

    def objective(b):
        eta = X @ b
        # log-likelihood: y*eta - log(1 + e^eta), computed stably
        return float(y @ eta - np.logaddexp(0.0, eta).sum() - 0.5 * (pen * b) @ b)

    obj = objective(beta)
    for it in range(1, max_iter + 1):
        prob = expit(X @ beta)
        grad = X.T @ (y - prob) - pen * beta
        if np.linalg.norm(grad) < tol:
            return beta, it - 1, True
        w = prob * (1.0 - prob)
        info = (X * w[:, None]).T @ X + np.diag(pen)
        try:
            L = cholesky_lower(info)
        except DecompositionError:
            return beta, it, False
        step = solve_triangular(L.T, solve_triangular(L, grad, lower=True))
        t = 1.0
        while True:
            cand = beta + t * step
            new = objective(cand)
            if new >= obj - 1e-12 * abs(obj) or t < 1e-10:
                break
            t *= 0.5
        if np.max(np.abs(cand - beta)) <= 1e-14 * (1.0 + np.max(np.abs(beta))):
            # Newton step below floating-point resolution: converged as far
            # as arithmetic allows.
            return cand, it, True
        beta, obj = cand, new
        if np.max(np.abs(X @ beta)) > 40.0 and ridge == 0.0:
            return beta, it, False
    return beta, max_iter, False


def logistic_fit(sample: CovariateSample, max_iter: int = 100, tol: float = 1e-8) -> PropensityModel:
    """Maximum-likelihood logistic regression of treatment on covariates.

    Fitted by iteratively reweighted least squares (Newton steps with
    step-halving). If the unpenalized fit diverges, which signals complete or
    quasi-complete separation, the fit is redone with a small ridge penalty
    on the slopes and the model is flagged ``penalized=True``.

    Raises:
        DomainError: a class is empty or there are too few units.
        SingularityError: the covariates are collinear.
    """
    y = sample.treated.astype(float)
    n, d = sample.covariates.shape
    if sample.n_treated == 0 or sample.n_control == 0:
        raise DomainError("both treated and control units are required")
    if n <= d + 1:
        raise DomainError(f"need more than {d + 1} units to fit {d} covariates, got {n}")
    X = np.column_stack([np.ones(n), sample.covariates])
    bad = _dependent_columns(X, ("(intercept)",) + sample.covariate_names)
    if bad:
        raise SingularityError(f"information matrix is singular; collinear covariates: {bad}", columns=bad)

    beta, iters, ok = _irls(X, y, 0.0, max_iter, tol)
    penalized = False
    if not ok:
        beta, iters, ok = _irls(X, y, RIDGE_LAMBDA, max_iter, tol)
        penalized = True
        if not ok:
            raise SingularityError("logistic fit failed to converge even with ridge penalty")
    logits = X @ beta
    return PropensityModel(
        coefficients=beta,
        logit_scores=logits,
        caliper_width=CALIPER_SD_MULTIPLIER * float(np.std(logits, ddof=1)),
        treated=sample.treated.copy(),
        penalized=penalized,
        iterations=iters,
    )


# --------------------------------------------------------------------------
# distances


def rank_mahalanobis_distances(sample: CovariateSample, rescale: bool = True) -> np.ndarray:
    """Rank-based Mahalanobis distances, treated (rows) x controls (columns).

    Covariates are replaced by their ranks in the pooled sample. The rank
    covariance has its diagonal reset to the variance of ``n`` untied ranks,
    ``(n**2 - 1) / 12``, keeping the correlations, so ties and outliers do
    not inflate or deflate a covariate's weight. With ``rescale=False`` the
    plain covariance of the ranks is used.
    """
    z = sample.covariates
    n, d = z.shape
    ranks = rank_transform(z)
    cov = np.atleast_2d(np.cov(ranks, rowvar=False))
    var = np.diag(cov)
    if np.any(var <= 0):
        bad = [sample.covariate_names[j] for j in np.flatnonzero(var <= 0)]
        raise SingularityError(f"covariates without variation: {bad}", columns=bad)
    if rescale:
        ratio = np.sqrt(((n * n - 1) / 12.0) / var)
        cov = cov * np.outer(ratio, ratio)
    try:
        L = cholesky_lower(cov)
    except DecompositionError:
        centered = ranks - ranks.mean(axis=0)
        bad = _dependent_columns(centered, sample.covariate_names) or list(sample.covariate_names)
        raise SingularityError(f"rank covariance is singular; collinear covariates: {bad}", columns=bad) from None
    white = solve_triangular(L, ranks.T, lower=True).T
    return cdist(white[sample.treated], white[~sample.treated])


def propensity_distances(model: PropensityModel, sample: CovariateSample | None = None) -> np.ndarray:
    """Absolute differences in the logit of the propensity score."""
    if sample is not None and sample.n != model.logit_scores.shape[0]:
        raise DomainError("propensity model was fitted on a different sample")
    return np.abs(model.treated_logits[:, None] - model.control_logits[None, :])


def outcome_distances(pre_outcomes_treated, pre_outcomes_control) -> np.ndarray:
    """Absolute differences in pre-period outcomes."""
    yt = np.atleast_1d(np.asarray(pre_outcomes_treated, dtype=float))
    yc = np.atleast_1d(np.asarray(pre_outcomes_control, dtype=float))
    if yt.size == 0 or yc.size == 0:
        raise DomainError("outcome vectors must be non-empty")
    return np.abs(yt[:, None] - yc[None, :])


def apply_caliper(dist, model: PropensityModel, penalty_scale: float | None = None) -> np.ndarray:
    """Soft caliper: add ``penalty_scale`` per unit of caliper violation.

    A pair violates the caliper when its logit propensity scores differ by
    strictly more than ``model.caliper_width``. When ``penalty_scale`` is
    None it defaults to 1000 x the median entry of ``dist``.
    Returns a new matrix; ``dist`` is left untouched.
    """
    dist = np.asarray(dist, dtype=float)
    gap = np.abs(model.treated_logits[:, None] - model.control_logits[None, :])
    if gap.shape != dist.shape:
        raise DomainError(f"distance matrix {dist.shape} does not match the model {gap.shape}")
    if penalty_scale is None:
        med = float(np.median(dist))
        penalty_scale = DEFAULT_PENALTY_MULTIPLIER * (med if med > 0 else 1.0)
    if not penalty_scale > 0:
        raise DomainError("penalty_scale must be positive")
    return dist + penalty_scale * np.maximum(0.0, gap - model.caliper_width)


# --------------------------------------------------------------------------
# assignment


@numba.njit(cache=True)
def _lsap_kernel(cost):
    # Shortest augmenting path with row/column potentials, one row at a time.
    # Requires n_rows <= n_cols and finite costs.
    n, m = cost.shape
    u = np.zeros(n)
    v = np.zeros(m)
    col4row = np.full(n, -1, np.int64)
    row4col = np.full(m, -1, np.int64)
    shortest = np.empty(m)
    path = np.empty(m, np.int64)
    in_cols = np.empty(m, np.bool_)
    in_rows = np.empty(n, np.bool_)
    for cur in range(n):
        shortest[:] = np.inf
        path[:] = -1
        in_cols[:] = False
        in_rows[:] = False
        i = cur
        min_val = 0.0
        sink = -1
        while sink < 0:
            in_rows[i] = True
            lowest = np.inf
            jbest = -1
            for j in range(m):
                if in_cols[j]:
                    continue
                r = min_val + cost[i, j] - u[i] - v[j]
                if r < shortest[j]:
                    path[j] = i
                    shortest[j] = r
                s = shortest[j]
                # on ties prefer an unassigned column: it ends the search
                if s < lowest or (s == lowest and row4col[j] < 0 and row4col[jbest] >= 0):
                    lowest = s
                    jbest = j
            min_val = lowest
            in_cols[jbest] = True
            if row4col[jbest] < 0:
                sink = jbest
            else:
                i = row4col[jbest]
        u[cur] += min_val
        for r_ in range(n):
            if in_rows[r_] and r_ != cur:
                u[r_] += min_val - shortest[col4row[r_]]
        for j in range(m):
            if in_cols[j]:
                v[j] -= min_val - shortest[j]
        j = sink
        while True:
            i = path[j]
            row4col[j] = i
            nxt = col4row[i]
            col4row[i] = j
            j = nxt
            if i == cur:
                break
    return col4row


def solve_assignment(cost) -> np.ndarray:
    """Column assigned to each row in a min-cost rectangular assignment.

    ``cost`` must be finite with no more rows than columns; every row gets a
    distinct column. Deterministic for a given matrix.
    """
    c = np.ascontiguousarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise DomainError("cost must be a 2-D matrix")
    n, m = c.shape
    if n > m:
        raise InfeasibleError(f"cannot assign {n} rows to {m} columns")
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    if not np.all(np.isfinite(c)):
        raise DomainError("cost matrix must be finite")
    return _lsap_kernel(c)


def optimal_match(dist, k: int = 1, treated_ids=None, control_ids=None) -> PairAssignment:
    """Optimal 1:k matching without replacement.

    Each treated row is replicated ``k`` times and the replicas solved as one
    rectangular assignment problem, so a treated unit never receives the same
    control twice and no control is used by two treated units.

    Raises:
        InfeasibleError: fewer than ``k * n_treated`` controls.
    """
    d = np.asarray(dist, dtype=float)
    if d.ndim != 2:
        raise DomainError("distance matrix must be 2-D")
    if k < 1:
        raise DomainError("k must be >= 1")
    n_t, n_c = d.shape
    if n_c < k * n_t:
        raise InfeasibleError(f"{n_t} treated units need {k * n_t} controls for 1:{k} matching, only {n_c} available")
    if np.any(d < 0) or not np.all(np.isfinite(d)):
        raise DomainError("distances must be finite and non-negative")
    cols = solve_assignment(np.repeat(d, k, axis=0))
    pairs = []
    dists = []
    for t in range(n_t):
        cs = tuple(sorted(int(c) for c in cols[t * k:(t + 1) * k]))
        pairs.append((t, cs))
        dists.append(tuple(float(d[t, c]) for c in cs))
    total = float(sum(sum(ds) for ds in dists))
    return PairAssignment(
        pairs=tuple(pairs),
        total_distance=total,
        controls_per_treated=k,
        pair_distances=tuple(dists),
        treated_ids=None if treated_ids is None else tuple(treated_ids),
        control_ids=None if control_ids is None else tuple(control_ids),
    )


def match_sample(sample: CovariateSample, k: int = 1, metric: str = "rank-mahalanobis",
                 caliper: bool = True, penalty_scale: float | None = None):
    """Fit, build distances and match in one call.

    Returns:
        ``(assignment, distances, model)``, where ``distances`` is the
        (caliper-penalized) matrix that was optimized.
    """
    if metric not in METRICS:
        raise DomainError(f"unknown metric {metric!r}; choose from {METRICS}")
    model = logistic_fit(sample)
    if metric == "propensity":
        dist = propensity_distances(model, sample)
    else:
        dist = rank_mahalanobis_distances(sample)
    if caliper:
        dist = apply_caliper(dist, model, penalty_scale)
    ids = sample.unit_ids
    assignment = optimal_match(dist, k,
                               treated_ids=ids[sample.treated].tolist(),
                               control_ids=ids[~sample.treated].tolist())
    return assignment, dist, model


# --------------------------------------------------------------------------
# balance


def standardized_differences(sample: CovariateSample, assignment: PairAssignment | None = None) -> BalanceTable:
    """Covariate balance before and (optionally) after matching.

    Both standardized differences divide by the same before-matching
    pooled SD, ``sqrt((var_treated + var_all_controls) / 2)``. A covariate
    with zero pooled variance gets NaN differences.
    """
    if sample.n_treated == 0 or sample.n_control == 0:
        raise DomainError("both groups are required")
    zt = sample.covariates[sample.treated]
    zc = sample.covariates[~sample.treated]
    mt = zt.mean(axis=0)
    mc = zc.mean(axis=0)
    vt = zt.var(axis=0, ddof=1) if zt.shape[0] > 1 else np.zeros(zt.shape[1])
    vc = zc.var(axis=0, ddof=1) if zc.shape[0] > 1 else np.zeros(zc.shape[1])
    s_pool = np.sqrt((vt + vc) / 2.0)
    if assignment is not None:
        mm = zc[assignment.control_indices].mean(axis=0)
    else:
        mm = np.full(zt.shape[1], np.nan)
    rows = []
    for j, name in enumerate(sample.covariate_names):
        ok = s_pool[j] > 0
        rows.append(BalanceRow(
            covariate=name,
            treated_mean=float(mt[j]),
            all_controls_mean=float(mc[j]),
            matched_controls_mean=float(mm[j]),
            std_diff_before=float((mt[j] - mc[j]) / s_pool[j]) if ok else math.nan,
            std_diff_after=float((mt[j] - mm[j]) / s_pool[j]) if ok else math.nan,
        ))
    return BalanceTable(tuple(rows))
