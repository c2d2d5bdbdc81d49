"""Design-based predictive inference for finite-population survey statistics.

Prediction estimators over probability samples with design-unbiased bias and
MSE estimation via subsampled training/test splits, plus the downstream
applications: selective editing scores, early totals for short-term
indicators, administrative-data unit selection, and time disaggregation of
sampling designs.
"""

from .popframe import (
    FeatureSchema,
    FinitePopulation,
    PopulationSchema,
    SchemaError,
    SimulationConfig,
    Unit,
    generate_linear_population,
    ingest_population,
    export_population,
)
from .designs import (
    Bernoulli,
    CutOff,
    DesignError,
    Sample,
    SamplingDesign,
    Srswor,
    StratifiedSrswor,
    design_from_spec,
    enumerate_samples,
    ht_total,
    ht_true_variance,
    ht_variance_estimate,
)
from .predictors import (
    FitError,
    Predictor,
    RankDeficiencyError,
    TrainSpec,
    fit,
    fit_arrays,
    load_predictor,
    predict,
    predict_proba,
    predictor_from_json,
    predictor_to_json,
    save_predictor,
)
from .srb import (
    SplitDesign,
    SrbError,
    UncertaintyReport,
    bias_estimate,
    mse_estimate,
    prediction_estimator,
    run_table1_simulation,
    split,
    srb_estimator,
)
from .editing import (
    EditingRecord,
    ScoreTable,
    ScoringError,
    area_under_priority,
    categorical_score,
    continuous_score,
    detection_rate_curve,
    make_score_table,
    pseudo_bias_curve,
)
from .earlyest import (
    EarlyTotal,
    FeatureFrame,
    PanelError,
    PanelStore,
    PanelUnit,
    build_features,
    early_total,
    early_totals_by_domain,
    make_synthetic_panel,
    rolling_fit,
)
from .adminframe import (
    AdminDataError,
    AdminPanel,
    CriteriaParams,
    CriteriaScores,
    criteria_scores,
    elbow_threshold,
    quantile_diagnostics,
    synthetic_values,
)
from .timedisagg import (
    CalibrationError,
    DisaggError,
    QuarterRecords,
    RotatingPanel,
    WeeklyDesign,
    measure_assignment_probs,
    monthly_estimate,
    monthly_estimate_pooled,
    monthly_variance,
    rake_weights,
    weekly_estimate,
    weekly_variance_bootstrap,
)
from .quantiles import nearest_rank_quantile, weighted_nearest_rank_quantile

__version__ = "0.1.0"
