"""Gravity and bias identification for a wrist force-torque sensor.

A rigid tool of mass ``m`` with its center of mass at ``c`` (sensor frame)
hangs from the sensor. At rest in orientation ``R`` (sensor to base) the
sensor reads

    F = F_bias + m * d        with d = R^T @ (0, 0, -g)
    tau = tau_bias + c x (m * d)

Both stages are linear: stage one stacks ``[I3 | d_i]`` rows to solve for
the force bias and mass, stage two stacks ``[I3 | -skew(m d_i)]`` rows to
solve for the torque bias and center of mass. Each stage is solved with an
orthogonal-decomposition least squares (SVD), not normal equations, and the
samples are canonically sorted first so the estimate is exactly invariant
to input order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegeneratePosesError, FrameError, InconsistentDataError
from .transforms import Frame, Wrench, quat_normalize, quat_to_mat, skew

STANDARD_GRAVITY = 9.80665  # m/s^2

_MIN_SAMPLES = 12
_MIN_DIRECTION_RANK = 3
_RANK_REL_TOL = 1e-6
_NEGATIVE_MASS_TOL = 1e-6
_UNCONSTRAINED_MASS = 1e-6  # below this the lever arm is unobservable


@dataclass
class CalibSample:
    """One quasi-static reading: sensor orientation in base, raw wrench."""

    orientation: np.ndarray  # quaternion (w, x, y, z), sensor frame in base
    wrench: Wrench

    def __post_init__(self):
        self.orientation = quat_normalize(self.orientation)
        if self.wrench.frame != Frame.SENSOR:
            raise FrameError("calibration samples must carry sensor-frame wrenches")


@dataclass
class ToolInertia:
    """Fitted tool model: everything needed to strip gravity from readings."""

    mass: float                      # kg
    com: np.ndarray                  # m, sensor frame
    force_bias: np.ndarray           # N
    torque_bias: np.ndarray          # N m
    residual_rms: float              # N, RMS of post-fit force residual norms
    gravity: float = STANDARD_GRAVITY
    com_unconstrained: bool = False  # true when mass ~ 0 leaves com free

    def __post_init__(self):
        self.com = np.asarray(self.com, dtype=float)
        self.force_bias = np.asarray(self.force_bias, dtype=float)
        self.torque_bias = np.asarray(self.torque_bias, dtype=float)


def _gravity_directions(samples) -> np.ndarray:
    """Unit gravity direction in the sensor frame, one row per sample."""
    down = np.array([0.0, 0.0, -1.0])
    return np.stack([quat_to_mat(s.orientation).T @ down for s in samples])


def _canonical_order(samples) -> list:
    keys = np.stack([
        np.concatenate([s.orientation, s.wrench.force, s.wrench.torque])
        for s in samples
    ])
    order = np.lexsort(keys.T[::-1])
    return [samples[int(i)] for i in order]


def estimate_tool_gravity(samples, gravity: float = STANDARD_GRAVITY) -> ToolInertia:
    """Fit mass, center of mass, and sensor biases from static readings.

    Args:
        samples: sequence of ``CalibSample``; needs at least 12, spanning at
            least 3 non-coplanar gravity directions in the sensor frame.
        gravity: gravitational acceleration magnitude.

    Raises:
        DegeneratePosesError: too few samples or directions that do not span
            three dimensions, which leaves the fit rank-deficient.
        InconsistentDataError: the best-fit mass is meaningfully negative.
    """
    samples = list(samples)
    if len(samples) < _MIN_SAMPLES:
        raise DegeneratePosesError(
            f"need at least {_MIN_SAMPLES} calibration samples, got {len(samples)}")
    samples = _canonical_order(samples)
    n = len(samples)

    units = _gravity_directions(samples)
    svals = np.linalg.svd(units, compute_uv=False)
    if svals[2] <= _RANK_REL_TOL * svals[0]:
        raise DegeneratePosesError(
            "gravity directions are rank deficient (singular values "
            f"{svals[0]:.3e}, {svals[1]:.3e}, {svals[2]:.3e}); need >= "
            f"{_MIN_DIRECTION_RANK} non-coplanar directions")

    d = units * gravity  # R^T (0,0,-g) per sample, shape (n, 3)

    # stage one: F_i = F_bias + m d_i
    a1 = np.zeros((3 * n, 4))
    b1 = np.empty(3 * n)
    for i, s in enumerate(samples):
        a1[3 * i:3 * i + 3, :3] = np.eye(3)
        a1[3 * i:3 * i + 3, 3] = d[i]
        b1[3 * i:3 * i + 3] = s.wrench.force
    x1, *_ = np.linalg.lstsq(a1, b1, rcond=None)
    force_bias, mass = x1[:3], float(x1[3])
    if mass < -_NEGATIVE_MASS_TOL:
        raise InconsistentDataError(f"fitted mass {mass:.6f} kg is negative")
    mass = max(mass, 0.0)

    # stage two: tau_i = tau_bias + c x (m d_i) = tau_bias - skew(m d_i) c
    a2 = np.zeros((3 * n, 6))
    b2 = np.empty(3 * n)
    for i, s in enumerate(samples):
        a2[3 * i:3 * i + 3, :3] = np.eye(3)
        a2[3 * i:3 * i + 3, 3:] = -skew(mass * d[i])
        b2[3 * i:3 * i + 3] = s.wrench.torque
    x2, *_ = np.linalg.lstsq(a2, b2, rcond=None)
    torque_bias, com = x2[:3], x2[3:]

    com_unconstrained = mass < _UNCONSTRAINED_MASS
    if com_unconstrained:
        com = np.zeros(3)

    resid = np.stack([s.wrench.force for s in samples]) - force_bias - mass * d
    residual_rms = float(np.sqrt(np.mean(np.sum(resid * resid, axis=1))))

    return ToolInertia(
        mass=mass, com=com, force_bias=force_bias, torque_bias=torque_bias,
        residual_rms=residual_rms, gravity=gravity,
        com_unconstrained=com_unconstrained)


def gravity_wrench(orientation, tool: ToolInertia) -> Wrench:
    """Bias plus tool gravity load the sensor reads in this orientation."""
    d = quat_to_mat(quat_normalize(orientation)).T @ np.array([0.0, 0.0, -tool.gravity])
    f = tool.mass * d
    return Wrench(tool.force_bias + f, tool.torque_bias + np.cross(tool.com, f),
                  Frame.SENSOR)


def compensate(w: Wrench, orientation, tool: ToolInertia) -> Wrench:
    """Remove bias and tool gravity, leaving the interaction wrench.

    ``orientation`` is the sensor frame's orientation in base. Input and
    output are sensor-frame wrenches; the result is the wrench the tool
    exerts on whatever it touches (zero in free space, up to sensor noise).
    """
    if w.frame != Frame.SENSOR:
        raise FrameError(f"compensate expects a sensor-frame wrench, got {w.frame.value!r}")
    g = gravity_wrench(orientation, tool)
    return Wrench(w.force - g.force, w.torque - g.torque, Frame.SENSOR)


def stationary_mask(timestamps, forces, window: float = 0.1,
                    max_range: float = 0.2) -> np.ndarray:
    """Mark samples whose force stays nearly constant around them.

    A sample is kept when, within ``window`` seconds centered on it, no
    force component spans more than ``max_range`` newtons. Motion between
    rest poses fails this and is dropped before fitting.
    """
    timestamps = np.asarray(timestamps, dtype=float)
    forces = np.asarray(forces, dtype=float)
    n = timestamps.shape[0]
    keep = np.empty(n, dtype=bool)
    half = 0.5 * window
    lo = np.searchsorted(timestamps, timestamps - half, side="left")
    hi = np.searchsorted(timestamps, timestamps + half, side="right")
    for i in range(n):
        seg = forces[lo[i]:hi[i]]
        keep[i] = float(np.max(seg.max(axis=0) - seg.min(axis=0))) <= max_range
    return keep
