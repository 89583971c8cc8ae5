"""Desk-scale simulator of federated multi-organ segmentation with
inconsistent labels: a multi-encoder segmentation network with an auxiliary
generic decoder, partial-label losses, and size-weighted federated averaging,
all on 2D synthetic data in pure NumPy."""

from .config import ConfigError, DataConfig, ExperimentConfig, default_config
from .federation import (
    FederationConfig,
    ProtocolError,
    TrainingDivergedError,
    aggregate,
    evaluate,
    local_train,
    make_clients,
    run_centralized,
    run_federation,
    run_localized,
)
from .losses import LabelError, LabelMap, LossConfig, LossReport, training_loss
from .metrics import asd, dsc, hierarchical_summary
from .network import MenuNet, NetworkConfig, ParameterSet, StructureMismatchError
from .synthdata import ClientDataset, DatasetSpec, GenerationError, make_benchmark
from .tensor import GradTape, NonFiniteError, Tensor, grad_check

__version__ = "0.1.0"

__all__ = [
    "ClientDataset", "ConfigError", "DataConfig", "DatasetSpec",
    "ExperimentConfig", "FederationConfig", "GenerationError", "GradTape",
    "LabelError", "LabelMap", "LossConfig", "LossReport", "MenuNet",
    "NetworkConfig", "NonFiniteError", "ParameterSet", "ProtocolError",
    "StructureMismatchError", "Tensor", "TrainingDivergedError", "aggregate",
    "asd", "default_config", "dsc", "evaluate", "grad_check",
    "hierarchical_summary", "local_train", "make_benchmark", "make_clients",
    "run_centralized", "run_federation", "run_localized", "training_loss",
]
