"""Variational inference for latent Gaussian models with standard encoders,
gradient-based optimizers, and learned iterative inference models."""
from .data import Dataset, LinearGaussianProblem, load_idx, make_linear_gaussian
from .inference import IterativeModel, StandardEncoder, iterative_infer, optimizer_infer
from .mathcore import ConfigError, Mlp, NonFiniteError, make_rng
from .model import DiagGaussian, GenerativeModel, PosteriorEstimate, elbo, evaluate
from .training import TrainConfig, train

__all__ = ["ConfigError", "Dataset", "DiagGaussian", "GenerativeModel", "IterativeModel",
           "LinearGaussianProblem", "Mlp", "NonFiniteError", "PosteriorEstimate",
           "StandardEncoder", "TrainConfig", "elbo", "evaluate", "iterative_infer",
           "load_idx", "make_linear_gaussian", "make_rng", "optimizer_infer", "train"]
