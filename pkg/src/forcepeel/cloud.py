"""Depth-image backprojection and point-cloud preparation.

The observation pipeline is: backproject a depth frame through the pinhole
model into the base frame, crop to the workspace box minus exclusion boxes,
then force the cloud to an exact point count so downstream consumers see a
fixed-size input. Clouds travel on disk as ``.pc3``: an 8-byte
little-endian count header followed by that many little-endian float32
xyz triples.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import EmptyCloudError, ParseError
from .transforms import Pose, inverse

_JITTER_COMPONENT = 1e-6 / np.sqrt(3.0)  # keeps jitter vector norm <= 1e-6 m
_BISECT_ITERS = 60


@dataclass
class Intrinsics:
    """Pinhole parameters in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")


@dataclass
class DepthFrame:
    """Depth image in meters; zero or non-finite pixels mean no return."""

    depth: np.ndarray  # (h, w)
    intrinsics: Intrinsics
    camera_pose: Pose  # camera frame in base frame

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=float)
        if self.depth.ndim != 2:
            raise ValueError(f"depth must be 2-D, got shape {self.depth.shape}")


@dataclass
class PointCloud:
    points: np.ndarray  # (n, 3), base frame, meters

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("cloud contains non-finite coordinates")

    @property
    def count(self) -> int:
        return int(self.points.shape[0])


@dataclass
class Box:
    """Axis-aligned box, closed at the lower faces and open at the upper."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        if self.lo.shape != (3,) or self.hi.shape != (3,):
            raise ValueError("box corners must be 3-vectors")
        if not np.all(self.lo < self.hi):
            raise ValueError(f"box must have lo < hi per axis, got {self.lo} / {self.hi}")

    def contains(self, points: np.ndarray) -> np.ndarray:
        return np.all((points >= self.lo) & (points < self.hi), axis=1)


def backproject(frame: DepthFrame) -> PointCloud:
    """Lift valid depth pixels into a base-frame cloud.

    Pixel (u, v) with depth z maps to camera coordinates
    ``((u - cx) z / fx, (v - cy) z / fy, z)``; zero and non-finite depths
    are skipped.

    Raises:
        EmptyCloudError: no pixel carried a valid return.
    """
    z = frame.depth
    h, w = z.shape
    valid = np.isfinite(z) & (z > 0.0)
    if not valid.any():
        raise EmptyCloudError("depth frame has no valid returns")
    vv, uu = np.nonzero(valid)
    zs = z[vv, uu]
    k = frame.intrinsics
    pts_cam = np.stack([
        (uu - k.cx) * zs / k.fx,
        (vv - k.cy) * zs / k.fy,
        zs,
    ], axis=1)
    return PointCloud(frame.camera_pose.apply_batch(pts_cam))


def render_points(points: np.ndarray, intrinsics: Intrinsics, camera_pose: Pose,
                  width: int, height: int) -> DepthFrame:
    """Project base-frame points into a z-buffered depth image.

    Points behind the camera or outside the image are dropped; when several
    points land on one pixel the nearest wins. Backprojecting the result
    recovers every surviving point exactly when the inputs lie on pixel
    center rays.
    """
    cam_from_base = inverse(camera_pose)
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    pc = cam_from_base.apply_batch(pts)
    depth = np.zeros((height, width))
    front = pc[:, 2] > 0.0
    pc = pc[front]
    u = np.rint(intrinsics.fx * pc[:, 0] / pc[:, 2] + intrinsics.cx).astype(int)
    v = np.rint(intrinsics.fy * pc[:, 1] / pc[:, 2] + intrinsics.cy).astype(int)
    ok = (u >= 0) & (u < width) & (v >= 0) & (v < height)
    u, v, z = u[ok], v[ok], pc[ok, 2]
    order = np.argsort(-z, kind="stable")  # nearest written last wins
    depth[v[order], u[order]] = z[order]
    return DepthFrame(depth, intrinsics, camera_pose)


def crop_workspace(cloud: PointCloud, bounds: Box, exclusions=()) -> PointCloud:
    """Keep points inside the workspace box and outside every exclusion box.

    Raises:
        EmptyCloudError: nothing survived, which a caller must not mistake
            for a valid observation.
    """
    keep = bounds.contains(cloud.points)
    for box in exclusions:
        keep &= ~box.contains(cloud.points)
    if not keep.any():
        raise EmptyCloudError("workspace crop removed every point")
    return PointCloud(cloud.points[keep])


def _voxel_count(pts: np.ndarray, origin: np.ndarray, edge: float) -> int:
    keys = np.floor((pts - origin) / edge).astype(np.int64)
    return np.unique(keys, axis=0).shape[0]


def _voxel_centroids(pts: np.ndarray, origin: np.ndarray, edge: float) -> np.ndarray:
    keys = np.floor((pts - origin) / edge).astype(np.int64)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    sums = np.zeros((uniq.shape[0], 3))
    np.add.at(sums, inv, pts)
    counts = np.bincount(inv, minlength=uniq.shape[0]).astype(float)
    return sums / counts[:, None]


def _farthest_point_select(pts: np.ndarray, k: int) -> np.ndarray:
    """Greedy farthest-point subset, seeded at index 0. Deterministic."""
    sel = np.empty(k, dtype=int)
    sel[0] = 0
    dist = np.sum((pts - pts[0]) ** 2, axis=1)
    for i in range(1, k):
        j = int(np.argmax(dist))
        sel[i] = j
        dist = np.minimum(dist, np.sum((pts - pts[j]) ** 2, axis=1))
    return pts[sel]


def _upsample(pts: np.ndarray, target: int, seed: int) -> np.ndarray:
    """Pad with resampled copies, each nudged by a jitter <= 1e-6 m.

    The original points pass through untouched, so the unjittered subset of
    the output is exactly the input multiset.
    """
    rng = np.random.default_rng(seed)
    extra = target - pts.shape[0]
    idx = rng.integers(0, pts.shape[0], size=extra)
    jitter = rng.uniform(-_JITTER_COMPONENT, _JITTER_COMPONENT, size=(extra, 3))
    return np.concatenate([pts, pts[idx] + jitter], axis=0)


def voxelize_to_count(cloud: PointCloud, target: int, seed: int = 0) -> PointCloud:
    """Resize a cloud to exactly ``target`` points.

    Sparse inputs are upsampled with replacement plus sub-micron jitter.
    Dense inputs are voxel-averaged at the largest edge length that still
    yields at least ``target`` occupied voxels (found by bisection), then
    trimmed to the exact count by farthest-point selection. The whole
    procedure is deterministic for a given seed.

    Raises:
        EmptyCloudError: the input has no points.
        ValueError: non-positive target.
    """
    if target <= 0:
        raise ValueError(f"target must be positive, got {target}")
    pts = cloud.points
    if pts.shape[0] == 0:
        raise EmptyCloudError("cannot voxelize an empty cloud")
    if pts.shape[0] < target:
        return PointCloud(_upsample(pts, target, seed))

    origin = pts.min(axis=0)
    diag = float(np.linalg.norm(pts.max(axis=0) - origin))
    lo = max(diag, 1.0) * 1e-12 + 1e-300
    if _voxel_count(pts, origin, lo) < target:
        # exact duplicates collapse at any voxel size; fall back to padding
        merged = _voxel_centroids(pts, origin, lo)
        if merged.shape[0] == target:
            return PointCloud(merged)
        return PointCloud(_upsample(merged, target, seed))

    hi = 2.0 * diag + 1.0
    if _voxel_count(pts, origin, hi) >= target:
        lo = hi  # even one giant voxel satisfies the target (target == 1)
    else:
        for _ in range(_BISECT_ITERS):
            mid = 0.5 * (lo + hi)
            if _voxel_count(pts, origin, mid) >= target:
                lo = mid
            else:
                hi = mid
    centroids = _voxel_centroids(pts, origin, lo)
    if centroids.shape[0] == target:
        return PointCloud(centroids)
    return PointCloud(_farthest_point_select(centroids, target))


def save_pc3(path, cloud: PointCloud) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", cloud.count))
        f.write(np.ascontiguousarray(cloud.points, dtype="<f4").tobytes())


def load_pc3(path) -> PointCloud:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 8:
        raise ParseError(f"{path}: truncated header ({len(blob)} bytes)")
    (count,) = struct.unpack("<Q", blob[:8])
    body = blob[8:]
    if len(body) != count * 12:
        raise ParseError(
            f"{path}: header says {count} points ({count * 12} bytes) but body has {len(body)}")
    pts = np.frombuffer(body, dtype="<f4").reshape(count, 3).astype(float)
    return PointCloud(pts)
