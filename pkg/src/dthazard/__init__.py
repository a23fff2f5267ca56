"""Discrete time-to-event regression: person-period data, parametric and
P-spline hazard models, survival trees and fit diagnostics."""

__version__ = "0.1.0"

from .data import (
    TIME, Covariate, DataError, Dataset, AugmentedDataset, augment, censoring_rate,
    factor, hazard_to_survival, ingest_csv, log_likelihood, recode_last_period,
)
from .glm import (
    ParametricHazardModel, build_design, continuation_ratio_factor, fit_irls, fit_parametric,
    predict_hazard, wald_table,
)
from .psplines import (
    AdditiveHazardModel, SplineBasisSpec, bspline_basis, difference_penalty, evaluate_smooth,
    fit_additive, select_smoothing,
)
from .tree import (
    SplitRule, SurvivalTree, TuningResult, best_split, gini, grow, information_criterion,
    laplace, predictive_loglik_cv, tune,
)
from .diagnostics import CalibrationTable, calibration, martingale_residuals, residual_trend
from .synth import CovariateLaw, GeneratorSpec, simulate, true_hazard
