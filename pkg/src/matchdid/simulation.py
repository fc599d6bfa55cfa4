"""Data-generating processes and the Monte Carlo replication engine.

Two designs are provided:

* ``Sim1Config`` -- treated covariates are a shifted copy of the control
  distribution and each unit's outcome slope is linear in its covariates,
  so any covariate imbalance turns directly into DID bias.
* ``Sim2Config`` -- one covariate population; both treatment and exposure to
  a post-period historical event are more likely for units with small
  ``beta'Z``. The event shifts post-period outcomes by ``delta_hist``.
  ``rtm_mode`` adds a covariate-driven level to every outcome, which makes
  matching on pre-period outcomes regress to the mean.

Replication ``r`` of a run with master seed ``s`` draws from
``RngStream(s, r)``; every strategy is evaluated on the same simulated
study, so results do not depend on execution order or on which other
strategies are requested.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

from .core_stats import (
    RngStream,
    as_generator,
    equicorrelation_matrix,
    mvn_sample,
    std_normal_cdf,
    summary_stats,
)
from .did import DEFAULT_ALPHA, DidEstimate, MatchedOutcomePairs, PanelDataset, paired_did, regression_did
from .errors import DomainError, ReplicationError
from .matching import (
    CovariateSample,
    PairAssignment,
    apply_caliper,
    logistic_fit,
    optimal_match,
    outcome_distances,
    propensity_distances,
    rank_mahalanobis_distances,
)

STRATEGIES = ("none", "half", "full", "outcome")
MAX_ATTEMPTS = 10
# spawn keys reserved outside the replication range
FROZEN_BETA_STREAM = 2**40
CALIBRATION_STREAM = 2**40 + 1


@dataclass(frozen=True)
class Sim1Config:
    d: int = 2
    rho: float = 0.2
    n_treated: int = 32
    n_control: int = 320
    alpha_tr: float = 1.25
    delta: float = 2.0
    beta_low: float = 2.0
    beta_high: float = 3.0
    freeze_beta: bool = False
    caliper: bool = True

    def __post_init__(self):
        equicorrelation_matrix(self.d, self.rho)
        if self.n_treated < 2:
            raise DomainError("need at least two treated units")
        if self.n_control < self.n_treated:
            raise DomainError("n_control must be >= n_treated")
        if self.beta_high < self.beta_low:
            raise DomainError("beta_high must be >= beta_low")

    @property
    def true_effect(self) -> float:
        return self.delta


@dataclass(frozen=True)
class Sim2Config:
    n_total: int = 400
    d: int = 8
    rho: float = 0.2
    delta_treat: float = -2.0
    delta_hist: float = -2.0
    beta_low: float = 0.2
    beta_high: float = 0.3
    intercept: float = 0.0
    treat_scale: float = 1.0
    rtm_mode: bool = False
    cov_beta_low: float = 0.2
    cov_beta_high: float = 0.3
    independent_beta: bool = False
    intercept_on_history: bool = True
    freeze_beta: bool = False
    caliper: bool = False

    def __post_init__(self):
        equicorrelation_matrix(self.d, self.rho)
        if self.n_total < 50:
            raise DomainError("n_total must be >= 50")
        if self.beta_high < self.beta_low or self.cov_beta_high < self.cov_beta_low:
            raise DomainError("coefficient ranges must satisfy high >= low")
        if not self.treat_scale > 0:
            raise DomainError("treat_scale must be positive")

    @property
    def true_effect(self) -> float:
        return self.delta_treat


@dataclass(frozen=True)
class SimulatedStudy:
    covariates: CovariateSample
    pre_outcomes: np.ndarray
    post_outcomes: np.ndarray
    true_effect: float
    kind: str
    hist_impacted: np.ndarray | None = None
    true_event_probs: np.ndarray | None = None
    attempts: int = 1

    @property
    def treated(self) -> np.ndarray:
        return self.covariates.treated


@dataclass(frozen=True)
class ReplicationSummary:
    scenario: str
    strategy: str
    mean: float
    sd: float
    median: float
    mad_scaled: float
    coverage: float
    mean_ci_length: float
    n_reps: int
    points: np.ndarray = field(default=None, repr=False, compare=False)
    covered: np.ndarray = field(default=None, repr=False, compare=False)

    def row(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k not in ("points", "covered", "n_reps")}


class BiasTerms(NamedTuple):
    term_treated: float
    term_control: float
    term_prob_gap: float

    @property
    def total(self) -> float:
        return self.term_treated - self.term_control + self.term_prob_gap


def _draw_beta(gen, low, high, d):
    return gen.uniform(low, high, size=d)


def _frozen_beta(rng, low, high, d, key=0):
    if not isinstance(rng, RngStream):
        raise DomainError("freeze_beta needs an RngStream to derive the frozen coefficients from")
    return _draw_beta(RngStream(rng.seed, FROZEN_BETA_STREAM, (key,)).generator(), low, high, d)


def gen_sim1(cfg: Sim1Config, rng) -> SimulatedStudy:
    """Draw one study from the shifted-covariate design."""
    gen = as_generator(rng)
    beta = (_frozen_beta(rng, cfg.beta_low, cfg.beta_high, cfg.d) if cfg.freeze_beta
            else _draw_beta(gen, cfg.beta_low, cfg.beta_high, cfg.d))
    sigma = equicorrelation_matrix(cfg.d, cfg.rho)
    mu = np.ones(cfg.d)
    z_t = mvn_sample(gen, cfg.alpha_tr * mu, sigma, cfg.n_treated)
    z_c = mvn_sample(gen, mu, sigma, cfg.n_control)
    z = np.vstack([z_t, z_c])
    treated = np.r_[np.ones(cfg.n_treated, bool), np.zeros(cfg.n_control, bool)]
    n = z.shape[0]
    slope = z @ beta + cfg.delta * treated
    pre = gen.standard_normal(n)
    post = slope + gen.standard_normal(n)
    return SimulatedStudy(
        covariates=CovariateSample.from_arrays(z, treated),
        pre_outcomes=pre,
        post_outcomes=post,
        true_effect=cfg.delta,
        kind="sim1",
    )


def _sim2_once(cfg: Sim2Config, gen, rng):
    if cfg.freeze_beta:
        beta = _frozen_beta(rng, cfg.beta_low, cfg.beta_high, cfg.d, 0)
        beta_h = _frozen_beta(rng, cfg.beta_low, cfg.beta_high, cfg.d, 1) if cfg.independent_beta else beta
    else:
        beta = _draw_beta(gen, cfg.beta_low, cfg.beta_high, cfg.d)
        beta_h = _draw_beta(gen, cfg.beta_low, cfg.beta_high, cfg.d) if cfg.independent_beta else beta
    z = mvn_sample(gen, np.ones(cfg.d), equicorrelation_matrix(cfg.d, cfg.rho), cfg.n_total)
    n = cfg.n_total
    p_treat = std_normal_cdf(-(cfg.intercept + cfg.treat_scale * (z @ beta)))
    h_shift = cfg.intercept if cfg.intercept_on_history else 0.0
    p_hist = std_normal_cdf(-(h_shift + z @ beta_h))
    treated = gen.random(n) < p_treat
    hist = gen.random(n) < p_hist
    pre = gen.standard_normal(n)
    post = cfg.delta_hist * hist + cfg.delta_treat * treated + gen.standard_normal(n)
    if cfg.rtm_mode:
        level = z @ _draw_beta(gen, cfg.cov_beta_low, cfg.cov_beta_high, cfg.d)
        pre = pre + level
        post = post + level
    return z, treated, hist, p_hist, pre, post


def gen_sim2(cfg: Sim2Config, rng) -> SimulatedStudy:
    """Draw one study from the historical-event design.

    A draw with fewer than two treated units, or fewer controls than treated
    units, cannot be analysed; it is redrawn from a derived sub-stream, at
    most ``MAX_ATTEMPTS`` times in total.
    """
    for attempt in range(MAX_ATTEMPTS):
        stream = rng.substream(attempt) if isinstance(rng, RngStream) and attempt else rng
        gen = as_generator(stream)
        z, treated, hist, p_hist, pre, post = _sim2_once(cfg, gen, rng)
        n_t = int(treated.sum())
        if n_t >= 2 and cfg.n_total - n_t >= n_t:
            return SimulatedStudy(
                covariates=CovariateSample.from_arrays(z, treated),
                pre_outcomes=pre,
                post_outcomes=post,
                true_effect=cfg.delta_treat,
                kind="sim2",
                hist_impacted=hist,
                true_event_probs=p_hist,
                attempts=attempt + 1,
            )
    raise DomainError(f"no usable treated/control split after {MAX_ATTEMPTS} attempts")


def generate(cfg, rng) -> SimulatedStudy:
    if isinstance(cfg, Sim1Config):
        return gen_sim1(cfg, rng)
    if isinstance(cfg, Sim2Config):
        return gen_sim2(cfg, rng)
    raise TypeError(f"unknown scenario type {type(cfg).__name__}")


def _index_draws(cfg: Sim2Config, rng, n_draws: int) -> np.ndarray:
    gen = as_generator(rng)
    z = mvn_sample(gen, np.ones(cfg.d), equicorrelation_matrix(cfg.d, cfg.rho), n_draws)
    betas = gen.uniform(cfg.beta_low, cfg.beta_high, size=(n_draws, cfg.d))
    return np.einsum("ij,ij->i", z, betas)


def _bisect(frac, target, lo, hi, tol, name):
    f_lo, f_hi = frac(lo), frac(hi)
    if not (min(f_lo, f_hi) <= target <= max(f_lo, f_hi)):
        raise DomainError(f"{name} bracket ({lo}, {hi}) does not contain the target fraction {target}")
    decreasing = f_lo > f_hi
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        f = frac(mid)
        if abs(f - target) < tol:
            return mid
        if (f > target) == decreasing:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def calibrate_intercept(cfg: Sim2Config, target_treated_fraction: float, rng,
                        n_draws: int = 100_000, bracket=(-10.0, 10.0), tol: float = 1e-5) -> float:
    """Intercept giving an expected treated fraction of ``target_treated_fraction``.

    The fraction ``E[1 - Phi(c + s * beta'Z)]`` (``s`` = ``cfg.treat_scale``)
    is estimated from ``n_draws`` common-random-number draws of ``(beta, Z)``
    and solved for ``c`` by bisection; it is monotone in ``c``.
    """
    if not (0.0 < target_treated_fraction < 0.9):
        raise DomainError("target fraction must lie in (0, 0.9)")
    index = cfg.treat_scale * _index_draws(cfg, rng, n_draws)
    return _bisect(lambda c: float(np.mean(std_normal_cdf(-(c + index)))),
                   target_treated_fraction, bracket[0], bracket[1], tol, "intercept")


def calibrate_treat_scale(cfg: Sim2Config, target_treated_fraction: float, rng,
                          n_draws: int = 100_000, bracket=(1e-3, 1.0), tol: float = 1e-5) -> float:
    """Multiplier ``s`` on ``beta'Z`` in the treatment probability hitting a target fraction.

    Shrinking ``s`` flattens treatment assignment towards a coin flip while
    leaving the historical-event probabilities untouched, which raises the
    treated share without making treated and impacted units any more alike.
    """
    if not (0.0 < target_treated_fraction < 0.9):
        raise DomainError("target fraction must lie in (0, 0.9)")
    index = _index_draws(cfg, rng, n_draws)
    return _bisect(lambda s: float(np.mean(std_normal_cdf(-(cfg.intercept + s * index)))),
                   target_treated_fraction, bracket[0], bracket[1], tol, "treat_scale")


# --------------------------------------------------------------------------
# strategies


def _columns_for(strategy: str, d: int) -> list:
    if strategy == "half":
        return list(range(math.ceil(d / 2)))
    return list(range(d))


def match_study(study: SimulatedStudy, strategy: str, caliper: bool | None = None,
                penalty_scale: float | None = None) -> PairAssignment:
    """1:1 assignment used by a matched strategy.

    ``half``/``full`` match on the first ceil(d/2) or all covariates. The
    shifted-covariate design uses rank-based Mahalanobis distances with a
    propensity caliper; the historical-event design uses the logit
    propensity score. ``outcome`` matches on pre-period outcomes.
    """
    sample = study.covariates
    if strategy == "outcome":
        dist = outcome_distances(study.pre_outcomes[sample.treated], study.pre_outcomes[~sample.treated])
        return optimal_match(dist)
    if strategy not in ("half", "full"):
        raise DomainError(f"strategy {strategy!r} does not match")
    sub = sample.select(_columns_for(strategy, sample.covariates.shape[1]))
    model = logistic_fit(sub)
    if study.kind == "sim1":
        dist = rank_mahalanobis_distances(sub)
        use_caliper = True if caliper is None else caliper
    else:
        dist = propensity_distances(model, sub)
        use_caliper = False if caliper is None else caliper
    if use_caliper:
        dist = apply_caliper(dist, model, penalty_scale)
    return optimal_match(dist)


def run_strategy(study: SimulatedStudy, strategy: str, true_effect: float | None = None,
                 alpha: float = DEFAULT_ALPHA, caliper: bool | None = None,
                 penalty_scale: float | None = None):
    """Estimate the effect with one strategy.

    Returns:
        ``(DidEstimate, covered)`` where ``covered`` says whether the
        confidence interval contains ``true_effect`` (default: the study's).
    """
    if strategy not in STRATEGIES:
        raise DomainError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    truth = study.true_effect if true_effect is None else true_effect
    w = study.treated
    if strategy == "none":
        panel = PanelDataset.two_period(np.arange(w.shape[0]), w, study.pre_outcomes, study.post_outcomes)
        est = regression_did(panel, alpha)
    else:
        a = match_study(study, strategy, caliper, penalty_scale)
        ti = np.flatnonzero(w)[a.treated_indices]
        ci = np.flatnonzero(~w)[a.control_indices]
        pairs = MatchedOutcomePairs(study.post_outcomes[ti], study.pre_outcomes[ti],
                                    study.post_outcomes[ci], study.pre_outcomes[ci])
        est = paired_did(pairs, alpha)
    return est, est.covers(truth)


def bias_decomposition(study: SimulatedStudy, assignment: PairAssignment) -> BiasTerms:
    """Split the realized history bias of a 1:1 match into three averages.

    ``term_treated`` and ``term_control`` average ``H - p`` over the matched
    treated units and their controls; ``term_prob_gap`` averages the
    difference in event probabilities within pairs. The realized bias
    contribution ``mean(H_treated - H_control)`` equals
    ``term_treated - term_control + term_prob_gap``.
    """
    if study.hist_impacted is None or study.true_event_probs is None:
        raise DomainError("study carries no historical-event oracle")
    if assignment.controls_per_treated != 1:
        raise DomainError("bias decomposition needs 1:1 matching")
    if assignment.n_pairs == 0:
        return BiasTerms(0.0, 0.0, 0.0)
    w = study.treated
    ti = np.flatnonzero(w)[assignment.treated_indices]
    ci = np.flatnonzero(~w)[assignment.control_indices]
    h = study.hist_impacted.astype(float)
    p = study.true_event_probs
    return BiasTerms(
        term_treated=float(np.mean(h[ti] - p[ti])),
        term_control=float(np.mean(h[ci] - p[ci])),
        term_prob_gap=float(np.mean(p[ti] - p[ci])),
    )


# --------------------------------------------------------------------------
# Monte Carlo engine


def _replicate(args):
    cfg, strategies, master_seed, r, alpha = args
    try:
        study = generate(cfg, RngStream(master_seed, r))
        out = []
        for s in strategies:
            est, cov = run_strategy(study, s, alpha=alpha, caliper=cfg.caliper)
            out.append((est.point, cov, est.ci_length))
        return r, out
    except Exception as exc:  # surfaced with the replication index
        raise ReplicationError(r, exc) from exc


def monte_carlo(scenario, strategies: Sequence[str], n_reps: int, master_seed: int,
                label: str = "", alpha: float = DEFAULT_ALPHA, workers: int = 1) -> list:
    """Run ``n_reps`` replications and summarize each strategy.

    Results are identical for any ``workers`` count: replication ``r``
    always uses ``RngStream(master_seed, r)``.

    Raises:
        ReplicationError: the first failing replication, with its index.
    """
    if n_reps < 2:
        raise DomainError("n_reps must be >= 2")
    strategies = list(strategies)
    for s in strategies:
        if s not in STRATEGIES:
            raise DomainError(f"unknown strategy {s!r}")
    jobs = [(scenario, strategies, master_seed, r, alpha) for r in range(n_reps)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_replicate, jobs, chunksize=max(1, n_reps // (4 * workers))))
    else:
        results = [_replicate(job) for job in jobs]
    results.sort(key=lambda x: x[0])

    summaries = []
    for k, s in enumerate(strategies):
        points = np.array([res[k][0] for _, res in results])
        covered = np.array([res[k][1] for _, res in results])
        lengths = np.array([res[k][2] for _, res in results])
        st = summary_stats(points)
        summaries.append(ReplicationSummary(
            scenario=label, strategy=s, mean=st.mean, sd=st.sd, median=st.median,
            mad_scaled=st.mad_scaled, coverage=float(covered.mean()),
            mean_ci_length=float(lengths.mean()), n_reps=n_reps,
            points=points, covered=covered,
        ))
    return summaries


# --------------------------------------------------------------------------
# table grids


TABLES = (4, 5, 6, 7, 8)
TABLE7_TREATED_FRACTION = 0.24


@dataclass(frozen=True)
class Scenario:
    label: str
    config: object
    strategies: tuple


def table_scenarios(table: int, master_seed: int = 0, overrides: dict | None = None) -> list:
    """Scenario grid behind one of the simulation result tables.

    ``overrides`` replaces config fields in every scenario of the grid. For
    table 7 the treatment index scale is calibrated to a 24% treated
    fraction unless ``treat_scale`` is overridden.
    """
    overrides = dict(overrides or {})
    if table == 4:
        grid = [(f"d={d}", Sim1Config(d=d)) for d in (2, 4, 8)]
        strategies = ("none", "half", "full")
    elif table == 5:
        grid = [(f"rho={rho}", Sim1Config(d=4, rho=rho)) for rho in (0.1, 0.05, 0.0)]
        strategies = ("none", "half", "full")
    elif table in (6, 7, 8):
        n_total = 2000 if table == 7 else 400
        grid = [(f"delta={dh:g}", Sim2Config(n_total=n_total, delta_hist=dh, rtm_mode=(table == 8)))
                for dh in (-2.0, -4.0, -6.0)]
        strategies = ("none", "full", "outcome") if table == 8 else ("none", "half", "full")
    else:
        raise DomainError(f"unknown table {table}; choose from {TABLES}")
    grid = [(lab, replace(cfg, **overrides)) for lab, cfg in grid]
    if table == 7 and "treat_scale" not in overrides:
        s = calibrate_treat_scale(grid[0][1], TABLE7_TREATED_FRACTION, RngStream(master_seed, CALIBRATION_STREAM))
        grid = [(lab, replace(cfg, treat_scale=s)) for lab, cfg in grid]
    return [Scenario(lab, cfg, strategies) for lab, cfg in grid]


def run_table(table: int, n_reps: int, master_seed: int, overrides: dict | None = None,
              workers: int = 1, alpha: float = DEFAULT_ALPHA, scenarios: list | None = None) -> list:
    """Monte Carlo summaries for every scenario x strategy of a table.

    Pass ``scenarios`` (from :func:`table_scenarios`) to skip rebuilding the grid.
    """
    out = []
    for sc in scenarios if scenarios is not None else table_scenarios(table, master_seed, overrides):
        out.extend(monte_carlo(sc.config, sc.strategies, n_reps, master_seed, label=sc.label,
                               alpha=alpha, workers=workers))
    return out
