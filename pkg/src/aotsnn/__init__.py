"""Spiking neural networks trained with an average-over-time loss, with calibration tooling."""

from .data import CorruptionSpec, Dataset, corrupt, load_mnist
from .metrics import CalibrationReport, accuracy, brier, ece, evaluate, nll
from .network import Network, NetworkConfig, build_network, cifar_config, mnist_config
from .tensor import ConfigError, DimensionError, NumericError, Rng, StateError
from .training import TrainConfig, train
from .uncertainty import (
    PredictiveDistribution,
    TemperatureModel,
    fit_temperature,
    predict_aot,
    predict_ensemble,
    predict_lts,
    predict_mc_dropout,
)

__version__ = "0.1.0"

__all__ = [
    "CalibrationReport",
    "ConfigError",
    "CorruptionSpec",
    "Dataset",
    "DimensionError",
    "Network",
    "NetworkConfig",
    "NumericError",
    "PredictiveDistribution",
    "Rng",
    "StateError",
    "TemperatureModel",
    "TrainConfig",
    "accuracy",
    "brier",
    "build_network",
    "cifar_config",
    "corrupt",
    "ece",
    "evaluate",
    "fit_temperature",
    "load_mnist",
    "mnist_config",
    "nll",
    "predict_aot",
    "predict_ensemble",
    "predict_lts",
    "predict_mc_dropout",
    "train",
]
