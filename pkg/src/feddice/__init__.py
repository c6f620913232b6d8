"""Federated ransomware detection for networks of hospital clinical environments."""

from ._accel import BACKEND
from .federation import FLConfig, cross_evaluate, fedavg, run_centralized, run_federated
from .metrics import ConfusionMatrix, MetricsReport, compute_metrics, confusion, evaluate
from .models import Arch, ParamVector, TrainConfig, build_model, train
from .netflow import Dataset, Family, FeatureVector, FlowRecord, Label, Scenario, WindowConfig

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "FLConfig", "cross_evaluate", "fedavg", "run_centralized", "run_federated",
    "ConfusionMatrix", "MetricsReport", "compute_metrics", "confusion", "evaluate",
    "Arch", "ParamVector", "TrainConfig", "build_model", "train",
    "Dataset", "Family", "FeatureVector", "FlowRecord", "Label", "Scenario", "WindowConfig",
]
