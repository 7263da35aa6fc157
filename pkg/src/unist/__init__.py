"""Decoupled spatio-temporal traffic forecasting toolkit.

Temporal mixing, task-adaptive graph encoding, and squeeze-excitation
residual fusion over scenario corpora with varying topology, plus masked
evaluation metrics, integrated-gradients attribution, and a synthetic
disruption-scenario generator. See the `unist` CLI for the operator
pipelines.
"""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, NumericalError, ShapeError, UnistError
from .graph import CandidateRelations, TrafficGraph, compose_relations, gcn_propagate, row_normalize, select_relation
from .metrics import MetricReport, masked_metrics, per_node_metrics
from .model import Model, ModelConfig, build_variant, count_params, load_checkpoint, save_checkpoint
from .tensor import Tensor, backward
from .training import AdamState, FitResult, SplitSpec, TrainConfig, fit, make_windows, persistence_baseline

__all__ = [
    "__version__",
    "AdamState",
    "CandidateRelations",
    "ConfigError",
    "DataError",
    "FitResult",
    "MetricReport",
    "Model",
    "ModelConfig",
    "NumericalError",
    "ShapeError",
    "SplitSpec",
    "Tensor",
    "TrafficGraph",
    "TrainConfig",
    "UnistError",
    "backward",
    "build_variant",
    "compose_relations",
    "count_params",
    "fit",
    "gcn_propagate",
    "load_checkpoint",
    "make_windows",
    "masked_metrics",
    "per_node_metrics",
    "persistence_baseline",
    "row_normalize",
    "save_checkpoint",
    "select_relation",
]
