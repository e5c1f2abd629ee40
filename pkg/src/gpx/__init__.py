"""Gaussian process regression with per-sample linear explanations."""

__version__ = "0.1.0"

from .kernels import KernelParams, chol_psd, chol_solve, gram_matrix, hadamard, rbf_kernel
from .model import (
    Dataset,
    Explanation,
    FittedGpr,
    FittedGpx,
    Hyperparams,
    PredictiveScalar,
    PredictiveWeights,
    condition,
    explain,
    explain_batch,
    fit,
    gpr_fit,
    gpr_predict,
    log_marginal_likelihood,
    lml_gradient,
    marginal_covariance,
    posterior_w_train,
    predict_w,
    predict_y,
)
from .optimize import OptimizerConfig, default_init, fit_hyperparams, lbfgs_minimize, median_heuristic

__all__ = [
    "KernelParams",
    "chol_psd",
    "chol_solve",
    "gram_matrix",
    "hadamard",
    "rbf_kernel",
    "Dataset",
    "Explanation",
    "FittedGpr",
    "FittedGpx",
    "Hyperparams",
    "PredictiveScalar",
    "PredictiveWeights",
    "condition",
    "explain",
    "explain_batch",
    "fit",
    "gpr_fit",
    "gpr_predict",
    "log_marginal_likelihood",
    "lml_gradient",
    "marginal_covariance",
    "posterior_w_train",
    "predict_w",
    "predict_y",
    "OptimizerConfig",
    "default_init",
    "fit_hyperparams",
    "lbfgs_minimize",
    "median_heuristic",
]
