"""Desk-scale federated learning simulator for clients with noisy labels."""

from .aggregate import AggregatorSpec, Upload, aggregate
from .config import parse_config
from .data import LabeledDataset, NoiseSpec, PartitionPlan
from .engine import ExperimentConfig, ExperimentReport, run_experiment
from .model import LossSpec, ModelSpec
from .numcore import ParamVector, RngStream
from .strategy import StrategySpec

__version__ = "0.1.0"

__all__ = [
    "AggregatorSpec", "ExperimentConfig", "ExperimentReport", "LabeledDataset", "LossSpec",
    "ModelSpec", "NoiseSpec", "ParamVector", "PartitionPlan", "RngStream", "StrategySpec",
    "Upload", "aggregate", "parse_config", "run_experiment",
]
