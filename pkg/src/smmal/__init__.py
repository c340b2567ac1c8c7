"""Semi-supervised multiple machine learning (SMMAL) estimation of the
average treatment effect with surrogate-augmented unlabeled data."""

from .datamodel import (
    SemiSupervisedDataset, ValidationReport, labeled_fraction, make_dataset, read_csv,
    validate_dataset, write_csv,
)
from .glm import (
    ConvergenceError, EmptyArmError, FitError, FitSpec, SeparationError, SparseLinearModel,
    UnboundedError, fit_calibrated_or, fit_calibrated_ps, fit_lasso_logistic, kkt_residual,
    select_lambda_cv,
)
from .splines import SplineBasisSpec, SplineModel, bspline_basis, fit_spline_nuisance
from .crossfit import (
    DRConfig, FoldPlan, NuisancePredictions, SplineLearnerConfig, assign_folds, crossfit_dr,
    crossfit_lowdim,
)
from .estimators import (
    AteEstimate, aipw_estimate, confidence_interval, influence_values, smmal_estimate,
    supervised_dml_estimate, supervised_dr_estimate,
)
from .dgp import (
    ScenarioSpec, SurrogateSpec, TruthRecord, gen_highdim, gen_lowdim, generate, true_nuisance,
)
from .harness import ExperimentConfig, MetricsRow, load_config, run_replication, run_study, summarize

__version__ = "0.1.0"

__all__ = [
    "SemiSupervisedDataset", "ValidationReport", "labeled_fraction", "make_dataset", "read_csv",
    "validate_dataset", "write_csv",
    "ConvergenceError", "EmptyArmError", "FitError", "FitSpec", "SeparationError",
    "SparseLinearModel", "UnboundedError", "fit_calibrated_or", "fit_calibrated_ps",
    "fit_lasso_logistic", "kkt_residual", "select_lambda_cv",
    "SplineBasisSpec", "SplineModel", "bspline_basis", "fit_spline_nuisance",
    "DRConfig", "FoldPlan", "NuisancePredictions", "SplineLearnerConfig", "assign_folds",
    "crossfit_dr", "crossfit_lowdim",
    "AteEstimate", "aipw_estimate", "confidence_interval", "influence_values", "smmal_estimate",
    "supervised_dml_estimate", "supervised_dr_estimate",
    "ScenarioSpec", "SurrogateSpec", "TruthRecord", "gen_highdim", "gen_lowdim", "generate",
    "true_nuisance",
    "ExperimentConfig", "MetricsRow", "load_config", "run_replication", "run_study", "summarize",
]
