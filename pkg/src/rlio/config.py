"""Experiment configuration: a YAML file with a fixed key set.

Top-level keys::

    seed: 0                 # sensor noise and trajectory phases
    lag: 2.5                # smoother window length (s)
    policies: [proposed, baseline, lio]
    out: results            # output directory
    initial_state: ground_truth   # or "lidar" (first LiDAR pose, zero velocity)
    threaded: false         # run policies concurrently (timings marked contended)
    streams: null           # optional recorded stream file to replay
    trajectory: {...}       # TrajectoryModel fields (kind, duration, pos_amp, ...)
    rig: {...}              # SensorRig fields (rates, extrinsics, noise levels, ...)
    imu_noise: {...}        # ImuNoiseParams fields
    degeneracy: null        # or {axis: [1, 0, 0], inflation: 1.0e6}
    optimizer: {...}        # OptimizerSettings fields

Missing keys take their defaults; unknown keys are errors.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .preintegration import ImuNoiseParams
from .simulator import DegeneracyProfile, SensorRig, TrajectoryModel
from .smoother import NodePolicy, OptimizerSettings


class ConfigError(ValueError):
    pass


def _fields(cls, exclude=()) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)} - set(exclude)


_SECTIONS = {
    "trajectory": (TrajectoryModel, {"seed"}),
    "rig": (SensorRig, {"imu_noise"}),
    "imu_noise": (ImuNoiseParams, set()),
    "optimizer": (OptimizerSettings, set()),
}
_INITIAL_STATES = ("ground_truth", "lidar")


def _plain(x):
    """YAML-friendly copy: tuples and arrays become lists, numpy scalars floats."""
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if hasattr(x, "tolist"):
        return _plain(x.tolist())
    return x


def _tuples(x):
    return tuple(_tuples(v) for v in x) if isinstance(x, list) else x


@dataclass
class ExperimentConfig:
    seed: int = 0
    lag: float = 2.5
    policies: list = field(default_factory=lambda: [p.value for p in NodePolicy])
    out: str = "results"
    initial_state: str = "ground_truth"
    threaded: bool = False
    streams: str | None = None
    trajectory: dict = field(default_factory=dict)
    rig: dict = field(default_factory=dict)
    imu_noise: dict = field(default_factory=dict)
    degeneracy: dict | None = None
    optimizer: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    # ------------------------------------------------------------------ validation
    def validate(self) -> None:
        if isinstance(self.seed, bool) or not isinstance(self.seed, int):
            raise ConfigError(f"seed: expected an integer, got {self.seed!r}")
        if isinstance(self.lag, bool) or not isinstance(self.lag, (int, float)) \
                or not math.isfinite(self.lag) or self.lag <= 0:
            raise ConfigError(f"lag: must be a positive number of seconds, got {self.lag!r}")
        if not isinstance(self.policies, list) or not self.policies:
            raise ConfigError("policies: expected a non-empty list")
        for p in self.policies:
            try:
                NodePolicy(p)
            except ValueError:
                choices = ", ".join(q.value for q in NodePolicy)
                raise ConfigError(f"policies: unknown policy {p!r} (choose from {choices})") from None
        if len(set(self.policies)) != len(self.policies):
            raise ConfigError("policies: duplicate entries")
        if not isinstance(self.out, str) or not self.out:
            raise ConfigError("out: expected a directory path")
        if self.initial_state not in _INITIAL_STATES:
            raise ConfigError(f"initial_state: expected one of {_INITIAL_STATES}, "
                              f"got {self.initial_state!r}")
        if not isinstance(self.threaded, bool):
            raise ConfigError(f"threaded: expected true/false, got {self.threaded!r}")
        if self.streams is not None and not isinstance(self.streams, str):
            raise ConfigError("streams: expected a file path or null")
        for name, (cls, excluded) in _SECTIONS.items():
            section = getattr(self, name)
            if not isinstance(section, dict):
                raise ConfigError(f"{name}: expected a mapping")
            allowed = _fields(cls, excluded)
            for key in section:
                if key not in allowed:
                    raise ConfigError(f"{name}.{key}: unknown key")
        if self.degeneracy is not None:
            if not isinstance(self.degeneracy, dict):
                raise ConfigError("degeneracy: expected a mapping or null")
            for key in self.degeneracy:
                if key not in ("axis", "inflation"):
                    raise ConfigError(f"degeneracy.{key}: unknown key")
        # building the objects runs their own range checks
        for name, build in (("imu_noise", self.noise_params), ("rig", self.sensor_rig),
                            ("trajectory", self.trajectory_model),
                            ("degeneracy", self.degeneracy_profile),
                            ("optimizer", self.optimizer_settings)):
            try:
                build()
            except ConfigError:
                raise
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{name}: {exc}") from None

    # ------------------------------------------------------------------ builders
    def noise_params(self) -> ImuNoiseParams:
        return ImuNoiseParams(**self.imu_noise)

    def sensor_rig(self) -> SensorRig:
        kw = {k: _tuples(v) for k, v in self.rig.items()}
        return SensorRig(imu_noise=self.noise_params(), **kw)

    def trajectory_model(self) -> TrajectoryModel:
        kw = {k: _tuples(v) for k, v in self.trajectory.items()}
        return TrajectoryModel(seed=self.seed, **kw)

    def degeneracy_profile(self) -> DegeneracyProfile | None:
        if self.degeneracy is None:
            return None
        d = self.degeneracy
        axis = d.get("axis", (1.0, 0.0, 0.0))
        return DegeneracyProfile(None if axis is None else tuple(axis),
                                 float(d.get("inflation", 1.0)))

    def optimizer_settings(self) -> OptimizerSettings:
        return OptimizerSettings(**self.optimizer)

    # ------------------------------------------------------------------ serialization
    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_dict(cls, data: dict | None) -> "ExperimentConfig":
        data = {} if data is None else data
        if not isinstance(data, dict):
            raise ConfigError("config root must be a mapping")
        allowed = _fields(cls)
        for key in data:
            if key not in allowed:
                raise ConfigError(f"{key}: unknown key")
        return cls(**data)


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: YAML syntax error: {exc}") from None
    return ExperimentConfig.from_dict(data)


def write_config(path, cfg: ExperimentConfig) -> None:
    Path(path).write_text(cfg.dump())
