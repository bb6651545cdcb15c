"""Fixed-lag radar-LiDAR-inertial smoothing with a simulated benchmark."""
from __future__ import annotations

from .bench import MetricsReport, run_experiment
from .config import ConfigError, ExperimentConfig, parse_config
from .factors import Extrinsics, NavState
from .manifold import Pose3, Rot3
from .metrics import compute_ate, compute_rte_per_meter
from .preintegration import ImuBias, ImuNoiseParams, PreintegratedImu
from .simulator import DegeneracyProfile, SensorRig, TrajectoryModel, simulate
from .smoother import NodePolicy, OptimizerSettings, Smoother

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DegeneracyProfile", "ExperimentConfig", "Extrinsics", "ImuBias",
    "ImuNoiseParams", "MetricsReport", "NavState", "NodePolicy", "OptimizerSettings",
    "Pose3", "PreintegratedImu", "Rot3", "SensorRig", "Smoother", "TrajectoryModel",
    "compute_ate", "compute_rte_per_meter", "parse_config", "run_experiment", "simulate",
]
