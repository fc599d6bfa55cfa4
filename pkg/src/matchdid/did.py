"""Difference-in-differences estimators and the pre-period trend test."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .core_stats import ols_fit, student_t_quantile, student_t_sf_two_sided
from .errors import DataError, DomainError
from .matching import PairAssignment

DEFAULT_ALPHA = 0.05


@dataclass(frozen=True)
class DidEstimate:
    point: float
    se: float
    df: int
    ci_low: float
    ci_high: float
    alpha: float = DEFAULT_ALPHA
    n: int = 0

    @property
    def ci_length(self) -> float:
        return self.ci_high - self.ci_low

    def covers(self, value: float) -> bool:
        return self.ci_low <= value <= self.ci_high


@dataclass(frozen=True)
class TrendTestResult:
    tau_hat: float
    se: float
    p_value: float
    df: int


def _estimate(point: float, se: float, df: int, alpha: float, n: int) -> DidEstimate:
    if not (0.0 < alpha < 1.0):
        raise DomainError(f"alpha must lie in (0, 1), got {alpha}")
    point, se = float(point), float(se)
    half = float(student_t_quantile(1.0 - alpha / 2.0, df)) * se
    return DidEstimate(point=point, se=se, df=int(df), ci_low=point - half, ci_high=point + half, alpha=alpha, n=int(n))


# --------------------------------------------------------------------------
# panel data


@dataclass(frozen=True)
class PanelDataset:
    """Long-format panel: one record per (unit, period).

    ``period`` holds ordinals (0, 1, ...); ``period_labels`` optionally maps
    each ordinal to the label it was read from.
    """

    unit_ids: np.ndarray
    group: np.ndarray
    period: np.ndarray
    outcome: np.ndarray
    period_labels: tuple = ()

    def __post_init__(self):
        ids = np.asarray(self.unit_ids)
        g = np.asarray(self.group).astype(bool)
        t = np.asarray(self.period).astype(int)
        y = np.asarray(self.outcome, dtype=float)
        if not (ids.shape == g.shape == t.shape == y.shape) or ids.ndim != 1:
            raise DomainError("panel columns must be 1-D and of equal length")
        if not np.all(np.isfinite(y)):
            raise DataError("panel outcomes contain missing or non-finite values")
        object.__setattr__(self, "unit_ids", ids)
        object.__setattr__(self, "group", g)
        object.__setattr__(self, "period", t)
        object.__setattr__(self, "outcome", y)
        object.__setattr__(self, "period_labels", tuple(self.period_labels))

        seen = {}
        for u, gi, ti in zip(ids.tolist(), g.tolist(), t.tolist()):
            key = (u, ti)
            if key in seen:
                raise DataError(f"unit {u!r} has more than one record for period {self.label(ti)!r}")
            seen[key] = gi
        groups = {}
        for (u, _), gi in seen.items():
            if groups.setdefault(u, gi) != gi:
                raise DataError(f"unit {u!r} changes group between periods")

    @classmethod
    def from_records(cls, records: Iterable[tuple], period_order: Sequence[str] | None = None) -> "PanelDataset":
        """Build from ``(unit_id, group, period_label, outcome)`` tuples.

        Period labels map to ordinals by ``period_order`` when given,
        otherwise by order of first appearance.
        """
        records = list(records)
        labels = list(period_order) if period_order is not None else []
        index = {lab: i for i, lab in enumerate(labels)}
        if period_order is None:
            for rec in records:
                if rec[2] not in index:
                    index[rec[2]] = len(labels)
                    labels.append(rec[2])
        else:
            unknown = sorted({rec[2] for rec in records} - set(index), key=str)
            if unknown:
                raise DataError(f"periods not listed in the period order: {unknown}")
        return cls(
            unit_ids=np.array([r[0] for r in records], dtype=object),
            group=np.array([bool(r[1]) for r in records]),
            period=np.array([index[r[2]] for r in records], dtype=int),
            outcome=np.array([float(r[3]) for r in records]),
            period_labels=tuple(labels),
        )

    @classmethod
    def two_period(cls, unit_ids, group, before, after) -> "PanelDataset":
        ids = np.asarray(unit_ids)
        n = ids.shape[0]
        return cls(
            unit_ids=np.concatenate([ids, ids]),
            group=np.concatenate([np.asarray(group, bool)] * 2),
            period=np.repeat([0, 1], n),
            outcome=np.concatenate([np.asarray(before, float), np.asarray(after, float)]),
        )

    def label(self, ordinal: int):
        if 0 <= ordinal < len(self.period_labels):
            return self.period_labels[ordinal]
        return ordinal

    def ordinal(self, period) -> int:
        """Ordinal for a period given as a label or an ordinal."""
        if period in self.period_labels:
            return self.period_labels.index(period)
        if isinstance(period, (int, np.integer)) and not isinstance(period, bool):
            if not self.period_labels or 0 <= period < len(self.period_labels):
                return int(period)
        raise DataError(f"unknown period {period!r}")

    @property
    def periods(self) -> list:
        return sorted(set(self.period.tolist()))

    def restrict(self, periods: Sequence[int]) -> "PanelDataset":
        keep = np.isin(self.period, list(periods))
        return PanelDataset(self.unit_ids[keep], self.group[keep], self.period[keep],
                            self.outcome[keep], self.period_labels)

    def wide(self, before: int, after: int):
        """Units observed in both periods as ``(ids, group, y_before, y_after)``.

        Raises:
            DataError: listing the units that lack one of the two periods.
        """
        b, a = {}, {}
        grp = {}
        for u, g, t, y in zip(self.unit_ids.tolist(), self.group.tolist(), self.period.tolist(), self.outcome.tolist()):
            if t == before:
                b[u] = y
            elif t == after:
                a[u] = y
            else:
                continue
            grp[u] = g
        missing = sorted(set(b) ^ set(a), key=str)
        if missing:
            raise DataError(f"units missing one of periods {self.label(before)!r}/{self.label(after)!r}: {missing}")
        ids = list(b)
        return (np.array(ids, dtype=object), np.array([grp[u] for u in ids]),
                np.array([b[u] for u in ids]), np.array([a[u] for u in ids]))

    def group_period_means(self) -> list:
        """``(group, period_label, mean_outcome, n)`` for every group x period cell."""
        out = []
        for g in (False, True):
            for t in self.periods:
                sel = (self.group == g) & (self.period == t)
                if sel.any():
                    out.append((int(g), self.label(t), float(self.outcome[sel].mean()), int(sel.sum())))
        return out


def _two_periods(panel: PanelDataset, before, after):
    if before is None and after is None:
        ps = panel.periods
        if len(ps) != 2:
            raise DataError(f"panel has {len(ps)} periods; name the before and after periods")
        return ps[0], ps[1]
    return panel.ordinal(before), panel.ordinal(after)


# --------------------------------------------------------------------------
# matched pairs


@dataclass(frozen=True)
class MatchedOutcomePairs:
    treated_after: np.ndarray
    treated_before: np.ndarray
    control_after: np.ndarray
    control_before: np.ndarray

    def __post_init__(self):
        arrs = [np.atleast_1d(np.asarray(getattr(self, f), dtype=float))
                for f in ("treated_after", "treated_before", "control_after", "control_before")]
        if len({a.shape for a in arrs}) != 1:
            raise DomainError("pair outcome vectors must have equal length")
        for name, arr in zip(("treated_after", "treated_before", "control_after", "control_before"), arrs):
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return int(self.treated_after.shape[0])

    @property
    def differences(self) -> np.ndarray:
        return (self.treated_after - self.treated_before) - (self.control_after - self.control_before)


def paired_did(pairs: MatchedOutcomePairs, alpha: float = DEFAULT_ALPHA) -> DidEstimate:
    """Matched-pair DID with a one-sample t confidence interval.

    Each pair contributes ``y = (treated after - before) - (control after -
    before)``; the ``y`` are treated as i.i.d. normal.
    """
    n = len(pairs)
    if n < 2:
        raise DomainError(f"need at least two pairs to estimate a variance, got {n}")
    y = pairs.differences
    se = float(np.std(y, ddof=1)) / math.sqrt(n)
    return _estimate(float(np.mean(y)), se, n - 1, alpha, n)


def group_means_did(mean_t_after: float, mean_t_before: float, mean_c_after: float, mean_c_before: float) -> float:
    return (mean_t_after - mean_t_before) - (mean_c_after - mean_c_before)


def pairs_from_assignment(panel: PanelDataset, assignment: PairAssignment, before=None, after=None) -> MatchedOutcomePairs:
    """Look up before/after outcomes for every matched pair (1:1 only)."""
    if assignment.controls_per_treated != 1:
        raise DomainError("paired outcomes require 1:1 matching")
    if assignment.n_pairs == 0:
        return MatchedOutcomePairs(*(np.zeros(0),) * 4)
    b, a = _two_periods(panel, before, after)
    lookup = {}
    for u, t, y in zip(panel.unit_ids.tolist(), panel.period.tolist(), panel.outcome.tolist()):
        if t in (a, b):
            lookup[(u, t)] = y
    rows = []
    missing = []
    for tid, cid, _ in assignment.id_pairs():
        rec = []
        for u in (tid, cid):
            for t in (a, b):
                if (u, t) not in lookup:
                    missing.append(u)
                rec.append(lookup.get((u, t), math.nan))
        rows.append(rec)
    if missing:
        raise DataError(f"matched units missing outcomes: {sorted(set(missing), key=str)}")
    arr = np.array(rows)
    return MatchedOutcomePairs(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3])


# --------------------------------------------------------------------------
# regression forms


def regression_did(panel: PanelDataset, alpha: float = DEFAULT_ALPHA, before=None, after=None) -> DidEstimate:
    """Two-way fixed-effects DID on two periods with classical OLS errors.

    Outcomes are regressed on unit fixed effects (removed by within-unit
    demeaning), an after-period dummy and the treated-by-after indicator,
    whose coefficient is the estimate. Degrees of freedom are
    ``n_obs - n_units - 2``.
    """
    b, a = _two_periods(panel, before, after)
    _, g, yb, ya = panel.wide(b, a)
    n = g.shape[0]
    if n < 3:
        raise DomainError("need at least three units")
    if g.all() or not g.any():
        raise DataError("both groups must be present")
    # after demeaning each unit's two records are -/+ half their change
    half_change = (ya - yb) / 2.0
    y = np.concatenate([-half_change, half_change])
    after_dm = np.repeat([-0.5, 0.5], n)
    treat_dm = np.concatenate([-0.5 * g, 0.5 * g])
    fit = ols_fit(np.column_stack([after_dm, treat_dm]), y, ["after", "treated_x_after"], absorbed_df=n)
    return _estimate(float(fit.coefficients[1]), float(fit.standard_errors[1]), fit.residual_df, alpha, n)


def parallel_trend_test(panel: PanelDataset, periods: Sequence | None = None) -> TrendTestResult:
    """Test for differential trends between two pre-treatment periods.

    Fits ``y = a + b*T + c*G + tau*T*G`` by OLS over the pooled records of
    the two periods and returns ``tau`` with its two-sided t-test p-value.
    """
    p0, p1 = _two_periods(panel, *(periods if periods is not None else (None, None)))
    sub = panel.restrict([p0, p1])
    t = (sub.period == p1).astype(float)
    g = sub.group.astype(float)
    for gv in (0.0, 1.0):
        for tv in (0.0, 1.0):
            if not np.any((g == gv) & (t == tv)):
                raise DataError(f"no records for group {int(gv)} in period {panel.label(p1 if tv else p0)!r}")
    X = np.column_stack([np.ones_like(t), t, g, t * g])
    fit = ols_fit(X, sub.outcome, ["intercept", "period", "group", "period_x_group"])
    tau, se = float(fit.coefficients[3]), float(fit.standard_errors[3])
    if se > 0:
        p = float(student_t_sf_two_sided(tau / se, fit.residual_df))
    else:
        p = 1.0 if abs(tau) <= 1e-12 * max(1.0, float(np.abs(sub.outcome).max())) else 0.0
    return TrendTestResult(tau, se, p, int(fit.residual_df))
