"""Amortized Bayesian workflows: simulate, train neural approximators, infer, criticise."""

from .amortizers import (
    ComparisonAmortizer,
    LikelihoodAmortizer,
    PosteriorAmortizer,
    build_comparison_amortizer,
    build_likelihood_amortizer,
    build_posterior_amortizer,
    expected_log_predictive_density,
    log_evidence,
)
from .errors import (
    AmortflowError,
    ConfigError,
    ContractError,
    DomainError,
    FormatError,
    ShapeError,
    SimulationError,
    TrainingError,
)
from .generative import Configurator, GenerativeModel, ModelMixture, SimulationBatch, builtin_model
from .rng import Rng
from .tensor import Tape, Tensor
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "AmortflowError",
    "ComparisonAmortizer",
    "ConfigError",
    "Configurator",
    "ContractError",
    "DomainError",
    "FormatError",
    "GenerativeModel",
    "LikelihoodAmortizer",
    "ModelMixture",
    "PosteriorAmortizer",
    "Rng",
    "ShapeError",
    "SimulationBatch",
    "SimulationError",
    "Tape",
    "Tensor",
    "TrainConfig",
    "TrainingError",
    "build_comparison_amortizer",
    "build_likelihood_amortizer",
    "build_posterior_amortizer",
    "builtin_model",
    "expected_log_predictive_density",
    "load_checkpoint",
    "log_evidence",
    "save_checkpoint",
    "train",
]

__version__ = "0.1.0"
