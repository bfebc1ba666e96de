"""On-disk formats: line-delimited records, raw sessions, manifests.

Everything numeric is stored as plain JSON numbers (shortest round-trip
repr), so write -> load -> write is byte identical; that property is what
makes reruns of the pipeline comparable with `diff`. Point clouds are the
one binary exception (.pc3, handled in cloud.py).
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .calibration import CalibSample, ToolInertia
from .errors import ParseError, ValidationError
from .transforms import Frame, TimedStream, Wrench

MANIFEST_VERSION = 1


# ---------------------------------------------------------------------------
# line-delimited JSON plumbing
# ---------------------------------------------------------------------------

def write_jsonl(path, rows) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def read_jsonl(path):
    """Parse one JSON object per line.

    Raises:
        ParseError: unreadable file, invalid JSON, or a non-object line.
    """
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as e:
        raise ParseError(f"cannot read {path}: {e}") from e
    rows = []
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as e:
            raise ParseError(f"{path}:{i + 1}: invalid JSON: {e}") from e
        if not isinstance(row, dict):
            raise ParseError(f"{path}:{i + 1}: expected an object, got {type(row).__name__}")
        rows.append(row)
    return rows


def _need(row: dict, key: str, where: str):
    if key not in row:
        raise ParseError(f"{where}: missing key {key!r}")
    return row[key]


def _vec(row: dict, key: str, n: int, where: str) -> np.ndarray:
    v = np.asarray(_need(row, key, where), dtype=float)
    if v.shape != (n,):
        raise ParseError(f"{where}: {key!r} must have {n} entries, got shape {v.shape}")
    return v


# ---------------------------------------------------------------------------
# demo records (the processed per-frame rows)
# ---------------------------------------------------------------------------

@dataclass
class DemoRecord:
    """One aligned observation row: everything the rig knew at one frame."""

    timestamp: float
    pose: np.ndarray                 # (7,) tcp in base, xyz + wxyz
    raw_wrench: np.ndarray           # (6,) as read from the sensor
    raw_frame: str = "sensor"
    wrench: np.ndarray = None        # (6,) gravity-compensated interaction
    gripper: float = None
    cloud: str = None                # relative path to a .pc3 file

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=float)
        self.raw_wrench = np.asarray(self.raw_wrench, dtype=float)
        if self.pose.shape != (7,):
            raise ValidationError(f"record pose must have 7 entries, got {self.pose.shape}")
        if self.raw_wrench.shape != (6,):
            raise ValidationError(f"record raw wrench must have 6 entries, got {self.raw_wrench.shape}")
        qn = np.linalg.norm(self.pose[3:])
        if abs(qn - 1.0) > 1e-6:
            raise ValidationError(f"record quaternion norm {qn} is not 1 within 1e-6")
        if self.wrench is not None:
            self.wrench = np.asarray(self.wrench, dtype=float)
            if self.wrench.shape != (6,):
                raise ValidationError(f"record wrench must have 6 entries, got {self.wrench.shape}")

    def to_dict(self) -> dict:
        row = {
            "t": self.timestamp,
            "pose": self.pose.tolist(),
            "raw_wrench": self.raw_wrench.tolist(),
            "raw_frame": self.raw_frame,
        }
        if self.wrench is not None:
            row["wrench"] = self.wrench.tolist()
        if self.gripper is not None:
            row["gripper"] = self.gripper
        if self.cloud is not None:
            row["cloud"] = self.cloud
        return row

    @staticmethod
    def from_dict(row: dict, where: str = "record") -> "DemoRecord":
        return DemoRecord(
            timestamp=float(_need(row, "t", where)),
            pose=_vec(row, "pose", 7, where),
            raw_wrench=_vec(row, "raw_wrench", 6, where),
            raw_frame=str(row.get("raw_frame", "sensor")),
            wrench=None if row.get("wrench") is None else _vec(row, "wrench", 6, where),
            gripper=row.get("gripper"),
            cloud=row.get("cloud"),
        )


def save_records(path, records) -> None:
    times = np.array([r.timestamp for r in records])
    if times.size and np.any(np.diff(times) <= 0.0):
        raise ValidationError("record timestamps must be strictly increasing")
    write_jsonl(path, [r.to_dict() for r in records])


def load_records(path):
    records = [DemoRecord.from_dict(row, f"{path}:{i + 1}")
               for i, row in enumerate(read_jsonl(path))]
    times = np.array([r.timestamp for r in records])
    if times.size and np.any(np.diff(times) <= 0.0):
        raise ValidationError(f"{path}: record timestamps must be strictly increasing")
    return records


# ---------------------------------------------------------------------------
# dataset manifest
# ---------------------------------------------------------------------------

@dataclass
class SegmentEntry:
    id: str
    records: str        # path relative to the manifest
    frames: int
    chunks: str = None  # path to the chunk file, relative to the manifest

    def to_dict(self) -> dict:
        d = {"id": self.id, "records": self.records, "frames": self.frames}
        if self.chunks is not None:
            d["chunks"] = self.chunks
        return d


@dataclass
class DatasetManifest:
    """Index of a processed dataset: segments plus the config that made it."""

    segments: list
    calibration: str = None          # path to the calibration document
    stats: str = None                # path to normalization statistics
    config: dict = field(default_factory=dict)
    version: int = MANIFEST_VERSION


def save_manifest(path, manifest: DatasetManifest) -> None:
    doc = {
        "version": manifest.version,
        "calibration": manifest.calibration,
        "stats": manifest.stats,
        "segments": [s.to_dict() for s in manifest.segments],
        "config": manifest.config,
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def load_manifest(path) -> DatasetManifest:
    """Load and validate: version understood, every referenced file present.

    Raises:
        ParseError: unreadable or malformed JSON.
        ValidationError: unknown version or missing referenced files.
    """
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as e:
        raise ParseError(f"cannot read manifest {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: invalid JSON: {e}") from e
    version = doc.get("version")
    if version != MANIFEST_VERSION:
        raise ValidationError(f"{path}: manifest version {version!r} not understood "
                              f"(this reader expects {MANIFEST_VERSION})")
    base = os.path.dirname(os.path.abspath(path))
    segments = []
    for i, s in enumerate(doc.get("segments", [])):
        where = f"{path}: segment {i}"
        entry = SegmentEntry(
            id=str(_need(s, "id", where)),
            records=str(_need(s, "records", where)),
            frames=int(_need(s, "frames", where)),
            chunks=s.get("chunks"),
        )
        segments.append(entry)
    manifest = DatasetManifest(
        segments=segments,
        calibration=doc.get("calibration"),
        stats=doc.get("stats"),
        config=doc.get("config", {}),
        version=version,
    )
    missing = []
    refs = [manifest.calibration, manifest.stats]
    refs += [s.records for s in segments] + [s.chunks for s in segments]
    for ref in refs:
        if ref is not None and not os.path.exists(os.path.join(base, ref)):
            missing.append(ref)
    if missing:
        raise ValidationError(f"{path}: referenced files missing: {missing}")
    return manifest


# ---------------------------------------------------------------------------
# calibration document (human-readable key-value text)
# ---------------------------------------------------------------------------

def _fmt_vec(v) -> str:
    return " ".join(repr(float(x)) for x in v)


def save_calibration(path, tool: ToolInertia, samples: int = 0,
                     created: str = "") -> None:
    lines = [
        "# tool gravity calibration",
        f"mass_kg = {float(tool.mass)!r}",
        f"com_m = {_fmt_vec(tool.com)}",
        f"force_bias_n = {_fmt_vec(tool.force_bias)}",
        f"torque_bias_nm = {_fmt_vec(tool.torque_bias)}",
        f"residual_rms_n = {float(tool.residual_rms)!r}",
        f"gravity_mps2 = {float(tool.gravity)!r}",
        f"com_unconstrained = {int(tool.com_unconstrained)}",
        f"samples = {int(samples)}",
        f"created = {created}",
    ]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_calibration(path) -> ToolInertia:
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as e:
        raise ParseError(f"cannot read calibration {path}: {e}") from e
    kv = {}
    for i, line in enumerate(lines):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"{path}:{i + 1}: expected 'key = value'")
        key, _, value = line.partition("=")
        kv[key.strip()] = value.strip()

    def floats(key: str, n: int) -> np.ndarray:
        if key not in kv:
            raise ParseError(f"{path}: missing key {key!r}")
        try:
            v = np.array([float(x) for x in kv[key].split()])
        except ValueError as e:
            raise ParseError(f"{path}: bad number in {key!r}: {e}") from e
        if v.shape != (n,):
            raise ParseError(f"{path}: {key!r} needs {n} numbers, got {v.size}")
        return v

    return ToolInertia(
        mass=float(floats("mass_kg", 1)[0]),
        com=floats("com_m", 3),
        force_bias=floats("force_bias_n", 3),
        torque_bias=floats("torque_bias_nm", 3),
        residual_rms=float(floats("residual_rms_n", 1)[0]),
        gravity=float(floats("gravity_mps2", 1)[0]),
        com_unconstrained=bool(int(floats("com_unconstrained", 1)[0])) if "com_unconstrained" in kv else False,
    )


# ---------------------------------------------------------------------------
# calibration log (quasi-static orientation sweep)
# ---------------------------------------------------------------------------

def save_calib_log(path, times, quats, wrenches) -> None:
    rows = [{"t": float(t), "quat": list(map(float, q)), "wrench": list(map(float, w))}
            for t, q, w in zip(times, quats, wrenches)]
    write_jsonl(path, rows)


def load_calib_log(path):
    """Returns (times (n,), quats (n,4), wrenches (n,6))."""
    rows = read_jsonl(path)
    if not rows:
        raise ParseError(f"{path}: calibration log is empty")
    times, quats, wrenches = [], [], []
    for i, row in enumerate(rows):
        where = f"{path}:{i + 1}"
        times.append(float(_need(row, "t", where)))
        quats.append(_vec(row, "quat", 4, where))
        wrenches.append(_vec(row, "wrench", 6, where))
    return np.array(times), np.stack(quats), np.stack(wrenches)


def calib_samples_from_log(quats, wrenches):
    return [CalibSample(q, Wrench(w[:3], w[3:], Frame.SENSOR))
            for q, w in zip(quats, wrenches)]


# ---------------------------------------------------------------------------
# raw sessions (multi-rate streams as a collection rig would log them)
# ---------------------------------------------------------------------------

@dataclass
class RawSegment:
    """One stroke's worth of unaligned streams, loaded from a segment dir."""

    wrench: TimedStream      # raw sensor-frame wrenches, fastest rate
    poses: TimedStream       # tcp pose stream
    frame_times: np.ndarray  # depth timestamps, slowest rate
    cloud_paths: list        # absolute .pc3 paths, parallel to frame_times


def write_raw_segment(seg_dir, wrench_times, wrenches, wrench_rate,
                      pose_times, poses, pose_rate,
                      frame_times, cloud_relpaths) -> None:
    os.makedirs(seg_dir, exist_ok=True)
    write_jsonl(os.path.join(seg_dir, "wrench.jsonl"),
                [{"t": float(t), "wrench": list(map(float, w)), "frame": "sensor"}
                 for t, w in zip(wrench_times, wrenches)])
    write_jsonl(os.path.join(seg_dir, "poses.jsonl"),
                [{"t": float(t), "pose": list(map(float, p))}
                 for t, p in zip(pose_times, poses)])
    write_jsonl(os.path.join(seg_dir, "frames.jsonl"),
                [{"t": float(t), "cloud": rel}
                 for t, rel in zip(frame_times, cloud_relpaths)])
    with open(os.path.join(seg_dir, "rates.json"), "w") as fh:
        json.dump({"wrench_hz": wrench_rate, "pose_hz": pose_rate}, fh)


def load_raw_segment(seg_dir) -> RawSegment:
    """Raises ParseError for unreadable streams, ValidationError for a
    referenced cloud file that does not exist."""
    wrench_rows = read_jsonl(os.path.join(seg_dir, "wrench.jsonl"))
    pose_rows = read_jsonl(os.path.join(seg_dir, "poses.jsonl"))
    frame_rows = read_jsonl(os.path.join(seg_dir, "frames.jsonl"))
    try:
        with open(os.path.join(seg_dir, "rates.json")) as fh:
            rates = json.load(fh)
    except OSError:
        rates = {}
    except json.JSONDecodeError as e:
        raise ParseError(f"{seg_dir}/rates.json: invalid JSON: {e}") from e
    if not wrench_rows or not pose_rows or not frame_rows:
        raise ParseError(f"{seg_dir}: empty stream file")

    def times_of(rows, where):
        return np.array([float(_need(r, "t", where)) for r in rows])

    wrench = TimedStream(
        times_of(wrench_rows, "wrench.jsonl"),
        np.stack([_vec(r, "wrench", 6, f"{seg_dir}/wrench.jsonl:{i + 1}")
                  for i, r in enumerate(wrench_rows)]),
        float(rates.get("wrench_hz", 1000.0)))
    poses = TimedStream(
        times_of(pose_rows, "poses.jsonl"),
        np.stack([_vec(r, "pose", 7, f"{seg_dir}/poses.jsonl:{i + 1}")
                  for i, r in enumerate(pose_rows)]),
        float(rates.get("pose_hz", 200.0)))
    frame_times = times_of(frame_rows, "frames.jsonl")
    cloud_paths = []
    for i, r in enumerate(frame_rows):
        rel = str(_need(r, "cloud", f"{seg_dir}/frames.jsonl:{i + 1}"))
        full = os.path.join(seg_dir, rel)
        if not os.path.exists(full):
            raise ValidationError(f"{seg_dir}: missing cloud file {rel}")
        cloud_paths.append(full)
    return RawSegment(wrench, poses, frame_times, cloud_paths)


def list_raw_segments(raw_dir):
    """Sorted segment directories under a raw session root."""
    try:
        names = sorted(os.listdir(raw_dir))
    except OSError as e:
        raise ParseError(f"cannot list raw directory {raw_dir}: {e}") from e
    return [os.path.join(raw_dir, n) for n in names
            if n.startswith("seg_") and os.path.isdir(os.path.join(raw_dir, n))]
