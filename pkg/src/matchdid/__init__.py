"""Matched-control difference-in-differences analysis."""

from .core_stats import RngStream, summary_stats
from .did import (
    DidEstimate,
    MatchedOutcomePairs,
    PanelDataset,
    TrendTestResult,
    group_means_did,
    paired_did,
    pairs_from_assignment,
    parallel_trend_test,
    regression_did,
)
from .matching import (
    CovariateSample,
    PairAssignment,
    PropensityModel,
    apply_caliper,
    logistic_fit,
    match_sample,
    optimal_match,
    outcome_distances,
    propensity_distances,
    rank_mahalanobis_distances,
    standardized_differences,
)
from .simulation import (
    ReplicationSummary,
    Sim1Config,
    Sim2Config,
    bias_decomposition,
    calibrate_intercept,
    calibrate_treat_scale,
    gen_sim1,
    gen_sim2,
    monte_carlo,
    run_strategy,
    run_table,
    table_scenarios,
)

__version__ = "0.1.0"
