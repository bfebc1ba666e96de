"""Pipeline configuration: nested dataclasses, YAML overrides, stable hashing.

Every tunable the command-line pipeline touches lives here so a single
YAML file pins a whole run. Unknown keys are rejected rather than
silently ignored; that catches typos before they cost a training run.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import yaml

from .calibration import STANDARD_GRAVITY
from .cloud import Box, Intrinsics
from .control import ControlGains
from .errors import ParseError, ValidationError
from .expert import ExpertConfig
from .policy import PolicyConfig, TrainConfig
from .sim import ZucchiniModel, look_at
from .transforms import Pose


@dataclass
class CloudConfig:
    """Workspace crop and voxelization applied to every depth frame."""

    size: int = 10_000
    seed: int = 0
    bounds_min: tuple = (0.30, -0.20, 0.02)
    bounds_max: tuple = (0.62, 0.20, 0.42)
    exclusions: tuple = ()   # pairs of (min xyz, max xyz)

    def bounds(self) -> Box:
        return Box(np.asarray(self.bounds_min), np.asarray(self.bounds_max))

    def exclusion_boxes(self) -> list:
        return [Box(np.asarray(lo), np.asarray(hi)) for lo, hi in self.exclusions]


@dataclass
class CameraConfig:
    fx: float = 70.0
    fy: float = 70.0
    cx: float = 39.5
    cy: float = 29.5
    width: int = 80
    height: int = 60
    eye: tuple = (0.15, -0.25, 0.40)
    target: tuple = (0.45, 0.0, 0.14)

    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.fx, self.fy, self.cx, self.cy)

    def pose(self) -> Pose:
        return look_at(np.asarray(self.eye), np.asarray(self.target))


@dataclass
class SimConfig:
    """Compliant-cylinder parameters for both data collection and rollout."""

    radius: float = 0.025
    length: float = 0.20
    k_n: float = 2000.0
    b_n: float = 10.0
    mu: float = 0.3
    n_angular: int = 72
    n_axial: int = 100
    f_lo: float = 3.0
    f_hi: float = 15.0
    damage_threshold: float = 25.0

    def model(self, pose: Pose = None) -> ZucchiniModel:
        kw = dataclasses.asdict(self)
        return ZucchiniModel(pose=pose, **kw)


@dataclass
class DemoGenConfig:
    """Synthetic collection-session parameters for `gen-demos`.

    The tool inertia here is ground truth that the calibrate command must
    recover from the emitted quasi-static log; the stream rates mimic the
    multi-rate recording rig (wrench fastest, depth slowest).
    """

    strokes: int = 4
    target_force: float = 6.0
    render_stride: int = 1       # records per depth frame
    wrench_rate: float = 1000.0  # Hz
    pose_rate: float = 200.0     # Hz
    wrench_noise: float = 0.005  # N, per-axis sensor noise on the raw stream
    calib_samples: int = 200     # distinct orientations in the calibration log
    calib_dwell: float = 0.12    # s held per orientation
    calib_rate: float = 200.0    # Hz within a dwell
    calib_noise: float = 0.02    # N, per-axis noise on the calibration log
    mass: float = 0.3
    com: tuple = (0.01, -0.005, 0.04)
    force_bias: tuple = (1.0, -2.0, 0.5)
    torque_bias: tuple = (0.02, 0.0, -0.01)


@dataclass
class EpisodeConfig:
    """Receding-horizon episode loop used by `rollout --policy`."""

    cycles: int = 30
    executed_horizon: int = 10
    threshold: float = 6.0       # N, primitive-selection force threshold
    consecutive: int = 3
    contact_threshold: float = 2.0


@dataclass
class PipelineConfig:
    seed: int = 0
    gravity: float = STANDARD_GRAVITY
    cloud: CloudConfig = field(default_factory=CloudConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    demo: DemoGenConfig = field(default_factory=DemoGenConfig)
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    control: ControlGains = field(default_factory=ControlGains)
    expert: ExpertConfig = field(default_factory=ExpertConfig)


_SECTIONS = {
    "cloud": CloudConfig,
    "camera": CameraConfig,
    "sim": SimConfig,
    "demo": DemoGenConfig,
    "episode": EpisodeConfig,
    "policy": PolicyConfig,
    "train": TrainConfig,
    "control": ControlGains,
    "expert": ExpertConfig,
}
_SCALARS = ("seed", "gravity")


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def _build_section(cls, data, where: str):
    if not isinstance(data, dict):
        raise ValidationError(f"config section {where!r} must be a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ValidationError(f"unknown keys {unknown} in config section {where!r}")
    return cls(**{k: _tuplify(v) for k, v in data.items()})


def load_config(path=None) -> PipelineConfig:
    """Defaults, overridden section by section from a YAML file.

    Raises:
        ParseError: unreadable file or invalid YAML.
        ValidationError: non-mapping document, unknown sections or keys.
    """
    if path is None:
        return PipelineConfig()
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh)
    except OSError as e:
        raise ParseError(f"cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ParseError(f"invalid YAML in {path}: {e}") from e
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ValidationError(f"config {path} must be a mapping at top level")
    unknown = sorted(set(doc) - set(_SECTIONS) - set(_SCALARS))
    if unknown:
        raise ValidationError(f"unknown config sections {unknown} in {path}")

    kwargs = {}
    for key in _SCALARS:
        if key in doc:
            kwargs[key] = doc[key]
    for key, cls in _SECTIONS.items():
        if key in doc:
            kwargs[key] = _build_section(cls, doc[key], key)
    return PipelineConfig(**kwargs)


def config_dict(cfg: PipelineConfig) -> dict:
    """Plain nested dict (tuples become lists), suitable for JSON/YAML."""
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def config_hash(cfg: PipelineConfig) -> str:
    """Stable short digest of every setting; stamps run directories."""
    canon = json.dumps(config_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


def save_config(cfg: PipelineConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config_dict(cfg), fh, sort_keys=True)
