"""Rigid-body poses, wrenches, and multi-rate timed streams.

Conventions used across the package:

- Quaternions are scalar-first ``(w, x, y, z)`` unit quaternions,
  canonicalized so the scalar part is non-negative.
- A ``Pose`` maps points from its child frame into its parent frame:
  ``p_parent = R(q) @ p_child + position``.
- A ``Wrench`` pairs force [N] and torque [N m] and carries an explicit
  frame tag. The sign convention everywhere in this package is the wrench
  exerted by the end-effector on the environment.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import FrameError, NormalizationError, StreamError

_QUAT_NORM_TOL = 1e-6
_SLERP_LINEAR_LIMIT = 1e-10


class Frame(str, Enum):
    SENSOR = "sensor"
    TCP = "tcp"
    BASE = "base"


def _as_vec(x, n: int, name: str) -> np.ndarray:
    v = np.asarray(x, dtype=float)
    if v.shape != (n,):
        raise ValueError(f"{name} must have shape ({n},), got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite values")
    return v


# ---------------------------------------------------------------------------
# quaternion helpers (scalar-first, canonical w >= 0)
# ---------------------------------------------------------------------------

def quat_canonical(q: np.ndarray) -> np.ndarray:
    """Return the sign-canonical form of ``q``: scalar part non-negative.

    ``q`` and ``-q`` encode the same rotation; the canonical representative
    has ``w > 0``, or if ``w == 0`` the first nonzero component positive.
    """
    q = np.asarray(q, dtype=float)
    if q[0] < 0.0:
        return -q
    if q[0] == 0.0:
        for c in q[1:]:
            if c != 0.0:
                return q if c > 0.0 else -q
    return q


def quat_normalize(q) -> np.ndarray:
    """Normalize and canonicalize a quaternion.

    Raises:
        NormalizationError: if the input norm deviates from 1 by more than
            1e-6, which indicates corrupted upstream data rather than
            ordinary floating-point drift.
    """
    q = _as_vec(q, 4, "quaternion")
    norm = float(np.linalg.norm(q))
    if abs(norm - 1.0) > _QUAT_NORM_TOL:
        raise NormalizationError(f"quaternion norm {norm:.9f} too far from 1")
    return quat_canonical(q / norm)


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vector ``v`` by unit quaternion ``q``."""
    w = q[0]
    u = q[1:]
    # Rodrigues form: v + 2w (u x v) + 2 u x (u x v)
    uv = np.cross(u, v)
    return v + 2.0 * w * uv + 2.0 * np.cross(u, uv)


def quat_to_mat(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def mat_to_quat(m: np.ndarray) -> np.ndarray:
    """Convert a rotation matrix to a canonical unit quaternion.

    Uses the Shepperd branch selection so the largest component is computed
    first, which keeps the conversion stable near 180 degree rotations.
    """
    m = np.asarray(m, dtype=float)
    t = np.trace(m)
    if t > 0.0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array([
            0.25 * s,
            (m[2, 1] - m[1, 2]) / s,
            (m[0, 2] - m[2, 0]) / s,
            (m[1, 0] - m[0, 1]) / s,
        ])
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array([
            (m[2, 1] - m[1, 2]) / s,
            0.25 * s,
            (m[0, 1] + m[1, 0]) / s,
            (m[0, 2] + m[2, 0]) / s,
        ])
    elif m[1, 1] >= m[2, 2]:
        s = np.sqrt(1.0 - m[0, 0] + m[1, 1] - m[2, 2]) * 2.0
        q = np.array([
            (m[0, 2] - m[2, 0]) / s,
            (m[0, 1] + m[1, 0]) / s,
            0.25 * s,
            (m[1, 2] + m[2, 1]) / s,
        ])
    else:
        s = np.sqrt(1.0 - m[0, 0] - m[1, 1] + m[2, 2]) * 2.0
        q = np.array([
            (m[1, 0] - m[0, 1]) / s,
            (m[0, 2] + m[2, 0]) / s,
            (m[1, 2] + m[2, 1]) / s,
            0.25 * s,
        ])
    return quat_canonical(q / np.linalg.norm(q))


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = _as_vec(axis, 3, "axis")
    n = np.linalg.norm(axis)
    if n == 0.0:
        return np.array([1.0, 0.0, 0.0, 0.0])
    half = 0.5 * float(angle)
    return quat_canonical(np.concatenate([[np.cos(half)], np.sin(half) * axis / n]))


def quat_slerp(q0: np.ndarray, q1: np.ndarray, u: float) -> np.ndarray:
    """Spherical interpolation along the shortest arc between two rotations.

    The endpoints are returned exactly at ``u == 0`` and ``u == 1`` (up to
    sign canonicalization), so repeated resampling at knots cannot drift.
    """
    q0 = quat_normalize(q0)
    q1 = quat_normalize(q1)
    if u == 0.0:
        return q0
    if u == 1.0:
        return q1
    dot = float(np.dot(q0, q1))
    if dot < 0.0:
        q1 = -q1
        dot = -dot
    if dot > 1.0 - _SLERP_LINEAR_LIMIT:
        # nearly parallel: slerp is numerically unstable, nlerp is exact here
        out = (1.0 - u) * q0 + u * q1
        return quat_canonical(out / np.linalg.norm(out))
    theta = np.arccos(np.clip(dot, -1.0, 1.0))
    s = np.sin(theta)
    out = (np.sin((1.0 - u) * theta) / s) * q0 + (np.sin(u * theta) / s) * q1
    return quat_canonical(out / np.linalg.norm(out))


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    """Axis-angle vector (unit axis times angle) of a rotation.

    The canonical sign makes the angle lie in [0, pi], so the result is
    always the shortest rotation vector.
    """
    q = quat_canonical(quat_normalize(q))
    s = float(np.linalg.norm(q[1:]))
    if s < 1e-12:
        # small angle: sin(a/2) ~ a/2, so the vector part is half the answer
        return 2.0 * q[1:]
    return (2.0 * np.arctan2(s, q[0]) / s) * q[1:]


def skew(v: np.ndarray) -> np.ndarray:
    """Matrix form of the cross product: ``skew(a) @ b == cross(a, b)``."""
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


# ---------------------------------------------------------------------------
# 6D rotation coding (first two rotation-matrix columns)
# ---------------------------------------------------------------------------

def rot6d_from_quat(q: np.ndarray) -> np.ndarray:
    """Encode a rotation as its first two matrix columns, flattened to 6."""
    m = quat_to_mat(q)
    return np.concatenate([m[:, 0], m[:, 1]])


def quat_from_rot6d(r6: np.ndarray) -> np.ndarray:
    """Decode a (possibly non-orthonormal) 6D code via Gram-Schmidt."""
    r6 = _as_vec(r6, 6, "rot6d")
    a1, a2 = r6[:3], r6[3:]
    n1 = np.linalg.norm(a1)
    if n1 < 1e-12:
        raise ValueError("rot6d first column has near-zero norm")
    b1 = a1 / n1
    a2p = a2 - np.dot(b1, a2) * b1
    n2 = np.linalg.norm(a2p)
    if n2 < 1e-12:
        raise ValueError("rot6d columns are collinear")
    b2 = a2p / n2
    b3 = np.cross(b1, b2)
    return mat_to_quat(np.stack([b1, b2, b3], axis=1))


# ---------------------------------------------------------------------------
# poses
# ---------------------------------------------------------------------------

@dataclass
class Pose:
    """Rigid transform: rotation ``quat`` then translation ``position``."""

    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    quat: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        self.position = _as_vec(self.position, 3, "position")
        self.quat = quat_normalize(self.quat)

    def rotation(self) -> np.ndarray:
        return quat_to_mat(self.quat)

    def apply(self, point: np.ndarray) -> np.ndarray:
        """Map a point from the child frame into the parent frame."""
        return quat_rotate(self.quat, np.asarray(point, dtype=float)) + self.position

    def apply_batch(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation().T + self.position

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.position, self.quat])

    @staticmethod
    def from_array(a) -> "Pose":
        a = _as_vec(a, 7, "pose array")
        return Pose(a[:3], a[3:])


def compose(a: Pose, b: Pose) -> Pose:
    """Transform composition: ``compose(a, b)`` applies ``b`` first, then ``a``."""
    return Pose(
        position=quat_rotate(a.quat, b.position) + a.position,
        quat=quat_mul(a.quat, b.quat),
    )


def inverse(p: Pose) -> Pose:
    qi = quat_conj(p.quat)
    return Pose(position=-quat_rotate(qi, p.position), quat=qi)


def pose_interp(a: Pose, b: Pose, u: float) -> Pose:
    """Interpolate two poses: linear in position, slerp in orientation."""
    return Pose(
        position=(1.0 - u) * a.position + u * b.position,
        quat=quat_slerp(a.quat, b.quat, u),
    )


# ---------------------------------------------------------------------------
# wrenches
# ---------------------------------------------------------------------------

@dataclass
class Wrench:
    """Force [N] plus torque [N m], tagged with the frame it is expressed in.

    Sign convention: the wrench the end-effector exerts on the environment.
    """

    force: np.ndarray
    torque: np.ndarray
    frame: Frame

    def __post_init__(self):
        self.force = _as_vec(self.force, 3, "force")
        self.torque = _as_vec(self.torque, 3, "torque")
        self.frame = Frame(self.frame)

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.force, self.torque])

    @staticmethod
    def from_array(a, frame: Frame) -> "Wrench":
        a = _as_vec(a, 6, "wrench array")
        return Wrench(a[:3], a[3:], frame)


def _check_same_frame(a: Wrench, b: Wrench, op: str):
    if a.frame != b.frame:
        raise FrameError(f"cannot {op} wrenches in frames {a.frame.value!r} and {b.frame.value!r}")


def wrench_add(a: Wrench, b: Wrench) -> Wrench:
    _check_same_frame(a, b, "add")
    return Wrench(a.force + b.force, a.torque + b.torque, a.frame)


def wrench_sub(a: Wrench, b: Wrench) -> Wrench:
    _check_same_frame(a, b, "subtract")
    return Wrench(a.force - b.force, a.torque - b.torque, a.frame)


def transform_wrench(w: Wrench, from_to: Pose, *, from_frame: Frame, to_frame: Frame) -> Wrench:
    """Re-express a wrench in another frame.

    ``from_to`` is the pose of the wrench's current frame in the target
    frame. The force rotates; the torque picks up the lever-arm term
    ``r x F`` from the frame origin shift.

    Raises:
        FrameError: if ``w`` is not expressed in ``from_frame``.
    """
    if w.frame != Frame(from_frame):
        raise FrameError(f"wrench is in frame {w.frame.value!r}, expected {Frame(from_frame).value!r}")
    f = quat_rotate(from_to.quat, w.force)
    tau = quat_rotate(from_to.quat, w.torque) + np.cross(from_to.position, f)
    return Wrench(f, tau, Frame(to_frame))


# ---------------------------------------------------------------------------
# timed streams and resampling
# ---------------------------------------------------------------------------

RESAMPLE_POLICIES = ("hold-last", "linear", "slerp")


@dataclass
class TimedStream:
    """Uniformly typed samples with strictly increasing timestamps.

    ``values`` has one row per timestamp. Rows are plain vectors for force
    or gripper channels, length-4 quaternions, or length-7 pose arrays
    (position then quaternion); the resampling policy decides how rows are
    interpolated, the stream itself does not care.
    """

    timestamps: np.ndarray
    values: np.ndarray
    nominal_rate: float

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.timestamps.ndim != 1 or self.timestamps.size == 0:
            raise StreamError("stream needs at least one timestamped sample")
        if self.values.ndim != 2 or self.values.shape[0] != self.timestamps.shape[0]:
            raise StreamError(
                f"values shape {self.values.shape} does not match {self.timestamps.shape[0]} timestamps")
        if np.any(np.diff(self.timestamps) <= 0.0):
            raise StreamError("timestamps must be strictly increasing")
        if self.nominal_rate <= 0.0:
            raise StreamError("nominal_rate must be positive")

    def __len__(self) -> int:
        return int(self.timestamps.shape[0])


def _check_targets(stream: TimedStream, target_times: np.ndarray, clamp: bool) -> np.ndarray:
    t = np.asarray(target_times, dtype=float)
    if t.ndim != 1 or t.size == 0:
        raise StreamError("target_times must be a non-empty 1-D array")
    if np.any(np.diff(t) < 0.0):
        raise StreamError("target_times must be non-decreasing")
    lo, hi = stream.timestamps[0], stream.timestamps[-1]
    if not clamp and (t[0] < lo or t[-1] > hi):
        raise StreamError(f"target times [{t[0]}, {t[-1]}] outside stream range [{lo}, {hi}]")
    return np.clip(t, lo, hi)


def resample(stream: TimedStream, target_times, policy: str = "linear", *,
             clamp: bool = True) -> np.ndarray:
    """Sample a stream at new timestamps.

    Policies:
        ``hold-last``: previous sample is held (zero-order hold).
        ``linear``: per-component linear interpolation.
        ``slerp``: rows are quaternions (4) or poses (7); orientation is
            spherically interpolated, position linearly.

    Targets outside the stream range clamp to the endpoint samples by
    default; with ``clamp=False`` they raise ``StreamError`` instead.
    Resampling at the stream's own timestamps returns the stored rows
    exactly for every policy.
    """
    if policy not in RESAMPLE_POLICIES:
        raise StreamError(f"unknown resample policy {policy!r}, expected one of {RESAMPLE_POLICIES}")
    t = _check_targets(stream, target_times, clamp)
    ts, vals = stream.timestamps, stream.values

    if policy == "hold-last":
        idx = np.searchsorted(ts, t, side="right") - 1
        idx = np.clip(idx, 0, len(ts) - 1)
        return vals[idx].copy()

    if policy == "linear":
        out = np.empty((t.size, vals.shape[1]))
        for j in range(vals.shape[1]):
            out[:, j] = np.interp(t, ts, vals[:, j])
        return out

    # slerp
    width = vals.shape[1]
    if width not in (4, 7):
        raise StreamError(f"slerp policy needs quaternion (4) or pose (7) rows, got width {width}")
    hi = np.searchsorted(ts, t, side="left")
    hi = np.clip(hi, 0, len(ts) - 1)
    lo = np.clip(hi - 1, 0, len(ts) - 1)
    out = np.empty_like(vals, shape=(t.size, width))
    for k in range(t.size):
        i, j = int(lo[k]), int(hi[k])
        if ts[j] == t[k] or i == j:
            out[k] = vals[j]
            continue
        u = (t[k] - ts[i]) / (ts[j] - ts[i])
        if width == 4:
            out[k] = quat_slerp(vals[i], vals[j], float(u))
        else:
            out[k, :3] = (1.0 - u) * vals[i, :3] + u * vals[j, :3]
            out[k, 3:] = quat_slerp(vals[i, 3:], vals[j, 3:], float(u))
    return out
