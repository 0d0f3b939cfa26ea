"""Parametric EDMD with maximum-likelihood reprojection onto the lifted-state manifold."""

from .covariance import CovarianceSurrogate, fit_Q, propagate_covariance, residuals, sigma_at
from .dictionary import MonomialDictionary
from .dynamics import Box, ParametricSystem, builtin_system, integrate
from .edmd import KoopmanModel, SnapshotSet, apply, fit_autonomous, fit_parametric, generate_snapshots, load_model, save_model
from .prediction import PredictorConfig, compare_to_truth, predict
from .reprojection import WeightMatrix, brute_force_project, coordinate_project, ml_weight, newton_project

__version__ = "0.1.0"

__all__ = [
    "Box",
    "CovarianceSurrogate",
    "KoopmanModel",
    "MonomialDictionary",
    "ParametricSystem",
    "PredictorConfig",
    "SnapshotSet",
    "WeightMatrix",
    "apply",
    "brute_force_project",
    "builtin_system",
    "compare_to_truth",
    "coordinate_project",
    "fit_Q",
    "fit_autonomous",
    "fit_parametric",
    "generate_snapshots",
    "integrate",
    "load_model",
    "ml_weight",
    "newton_project",
    "predict",
    "propagate_covariance",
    "residuals",
    "save_model",
    "sigma_at",
]
