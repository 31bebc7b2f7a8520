"""Federated segmentation simulator with dynamic client and aggregation weighting."""

from .client import Client, ClientConfig, train_round
from .datagen import ClientDatasetSpec, default_benchmark, generate
from .model import ModelSpec, init_params, loss_and_grad
from .param_math import SparseUpdate, UsageError, top_fraction_mask, weighted_sum
from .server import AggregationConfig, Server, aggregate, dwa_weights, fedavg_weights
from .transport import run_federation

__version__ = "0.1.0"

__all__ = [
    "AggregationConfig", "Client", "ClientConfig", "ClientDatasetSpec", "ModelSpec", "Server",
    "SparseUpdate", "UsageError", "aggregate", "default_benchmark", "dwa_weights", "fedavg_weights",
    "generate", "init_params", "loss_and_grad", "run_federation", "top_fraction_mask", "train_round",
    "weighted_sum",
]
