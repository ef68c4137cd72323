"""Ordinal risk-prediction models: fitting, calibration, and simulation."""

from .data import Dataset, load_dataset, write_dataset
from .models import (
    FitOptions,
    FittedModel,
    ModelSpec,
    ProbMatrix,
    SpecificationError,
    ValidityReport,
    cumulative_validity,
    fit,
    linear_predictors,
    lr_test_proportionality,
    model_from_json,
    model_to_json,
    nll_and_gradient,
    param_count,
    predict_probs,
    spec_from_label,
)

from .calibration import (
    FlexibleRecalibration,
    WeakCalibration,
    calibration_curve_data,
    eci,
    flexible_recalibration,
    model_specific_calibration,
    weak_calibration,
    write_calibration_plots,
)
from .metrics import expected_outcome_score, orc, rmspe
from .simulation import (
    Scenario,
    SimulatedData,
    builtin_scenarios,
    generate,
    replicate_seed,
    true_risks,
    write_simulated,
)
from .validation import (
    BootstrapResult,
    PerformanceRow,
    bootstrap_correct,
    evaluate_model,
    large_sample_study,
    small_sample_study,
    write_study_csv,
    write_study_json,
)

__version__ = "0.1.0"
