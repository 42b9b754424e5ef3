"""Latent Gaussian-process functional regression for non-Gaussian curves.

Fits repeatedly observed functional/longitudinal responses from an
exponential family (binary, binomial, Poisson, ordinal) with a B-spline
mean structure shared across subjects and a per-subject Gaussian-process
deviation, learns hyper-parameters by maximising a Laplace-type
approximate marginal likelihood, and delivers latent and response-scale
predictive distributions for partially observed or entirely new subjects.
"""

from . import basis, families, kernels, latent, mixed, predict, simulate
from .data import CsvSchema, Dataset, FunctionalBatch, load_csv, save_csv
from .exceptions import (ConditioningError, ConvergenceError, GgpfrError,
                         ModelFormatError, NumericalError, SchemaError,
                         ValidationError)
from .fitting import bic, fit, objective, select_basis_dim
from .mixed import ClusteredDataset, fit_clustered, predict_clustered
from .model import FittedModel, ModelSpec, load_model, save_model
from .predict import (PredictiveDistribution, classify, latent_posterior_at,
                      predict_new_batch, predict_response,
                      predict_response_laplace)
from .simulate import SimConfig, metrics, sim_binomial_se, sim_chebyshev, sim_ordinal

__version__ = "0.1.0"

__all__ = [
    "CsvSchema", "Dataset", "FunctionalBatch", "load_csv", "save_csv",
    "ModelSpec", "FittedModel", "load_model", "save_model",
    "fit", "objective", "bic", "select_basis_dim",
    "ClusteredDataset", "fit_clustered", "predict_clustered",
    "PredictiveDistribution", "classify", "latent_posterior_at",
    "predict_response", "predict_response_laplace", "predict_new_batch",
    "SimConfig", "metrics", "sim_binomial_se", "sim_chebyshev", "sim_ordinal",
    "GgpfrError", "SchemaError", "ValidationError", "ModelFormatError",
    "NumericalError", "ConditioningError", "ConvergenceError",
    "basis", "families", "kernels", "latent", "mixed", "predict", "simulate",
]
