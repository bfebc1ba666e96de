"""Scripted peeling expert and demonstration assembly.

The expert knows the cylinder's true pose (it is the data-collection rig,
not a learned policy). Each stroke is: servo to a standoff point over the
skin, press radially to contact, regulate the force setpoint in place
until the transient has died, then slide down the axis with the hybrid law
while recording pose and wrench at the action-step rate.

Recording deliberately skips the press and settle phases: every recorded
in-contact sample then sits near the stroke's setpoint instead of sweeping
through the approach ramp, which is the force distribution the policy
should imitate.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cloud import backproject, crop_workspace, save_pc3, voxelize_to_count
from .control import ControlGains, HybridParams, press_to_contact, track_hybrid, track_position
from .errors import ValidationError
from .policy import PolicyParams, Observation, TrainItem, sample_chunk
from .sim import SimState, ZucchiniModel, default_camera, default_workspace, render_depth
from .transforms import (
    Pose,
    mat_to_quat,
    quat_from_axis_angle,
    quat_mul,
    rot6d_from_quat,
)


@dataclass
class ExpertConfig:
    """Stroke geometry and recording policy of the scripted expert."""

    force_jitter: float = 1.0      # N, uniform setpoint jitter per stroke
    angle_jitter: float = 0.25     # fraction of a stroke slot, lateral jitter
    stroke_speed: float = 0.03     # m/s along the axis
    approach_standoff: float = 0.006  # m above the skin at stroke start
    approach_gap: float = 0.001    # m left for the pressing phase
    approach_steps: int = 8        # recorded free-flight steps
    settle_time: float = 0.5       # s of unrecorded force regulation
    axial_hi: float = 0.93         # stroke start, fraction of length
    axial_lo: float = 0.06         # stroke end, fraction of length


@dataclass
class Demo:
    """One recorded stroke at the action-step rate.

    ``clouds`` maps record indices to rendered point clouds (empty when the
    demo was generated without perception).
    """

    times: np.ndarray              # (n,)
    poses: np.ndarray              # (n, 7) xyz + wxyz
    wrenches: np.ndarray           # (n, 6) tcp frame, exerted on environment
    setpoint: float
    theta: float
    clouds: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.times)


def _stroke_frames(model: ZucchiniModel, theta: float):
    """Outward normal, axis direction, and tool orientation for a stroke
    at angle ``theta``: blade edge tangential, tool +z pressing inward."""
    rot = model.pose.rotation()
    normal = rot @ np.array([np.cos(theta), np.sin(theta), 0.0])
    axis = rot @ np.array([0.0, 0.0, 1.0])
    edge = np.cross(axis, normal)
    edge = edge / np.linalg.norm(edge)
    z_tool = -normal
    y_tool = np.cross(z_tool, edge)
    quat = mat_to_quat(np.stack([edge, y_tool, z_tool], axis=1))
    return normal, axis, quat


def _surface_point(model: ZucchiniModel, theta: float, frac: float) -> np.ndarray:
    return model.pose.apply(np.array([
        model.radius * np.cos(theta), model.radius * np.sin(theta),
        frac * model.length]))


def _step_end_ticks(ticks, ticks_per_step: int):
    return ticks[ticks_per_step - 1::ticks_per_step]


def stroke_start_pose(model: ZucchiniModel, theta: float,
                      cfg: ExpertConfig = None) -> Pose:
    """Hover pose over the skin where a stroke at ``theta`` begins."""
    cfg = cfg or ExpertConfig()
    normal, _, quat = _stroke_frames(model, theta)
    start = _surface_point(model, theta, cfg.axial_hi) + cfg.approach_standoff * normal
    return Pose(start, quat)


def run_scripted_stroke(state: SimState, theta: float, setpoint: float,
                        cfg: ExpertConfig = None, gains: ControlGains = None):
    """One full stroke from the current model state.

    Returns ``(state, records, all_ticks)`` where ``records`` is the list
    of (time, pose array, wrench array) demo samples and ``all_ticks`` is
    the complete controller log including press and settle.
    """
    cfg = cfg or ExpertConfig()
    gains = gains or ControlGains()
    model = state.model
    normal, axis, _ = _stroke_frames(model, theta)
    hover = stroke_start_pose(model, theta, cfg)
    start, quat = hover.position, hover.quat

    state = SimState(tool_pose=hover, model=model, time=state.time)
    records = []
    all_ticks = []

    def record(ticks):
        for t in _step_end_ticks(ticks, gains.ticks_per_step):
            records.append((t.time, t.pose.as_array(), t.wrench.as_array()))

    # recorded free-flight approach to just above the skin
    near = Pose(start - (cfg.approach_standoff - cfg.approach_gap) * normal, quat)
    state, ticks = track_position(state, [near] * cfg.approach_steps, gains)
    record(ticks)
    all_ticks.extend(ticks)

    # unrecorded: press to contact, then hold position while the force
    # loop pulls the setpoint in
    state, _, press_ticks = press_to_contact(state, -setpoint * normal, gains)
    all_ticks.extend(press_ticks)
    t_step = gains.tick_dt * gains.ticks_per_step
    n_settle = max(1, int(round(cfg.settle_time / t_step)))
    hold = HybridParams(-axis, np.tile(-setpoint * normal, (n_settle, 1)),
                        [state.tool_pose] * n_settle)
    state, ticks = track_hybrid(state, hold, gains)
    all_ticks.extend(ticks)

    # recorded peel: slide down the axis under force regulation
    span = (cfg.axial_hi - cfg.axial_lo) * model.length
    n_peel = max(2, int(round(span / (cfg.stroke_speed * t_step))))
    here = state.tool_pose.position
    targets = [Pose(here - axis * cfg.stroke_speed * t_step * (i + 1), quat)
               for i in range(n_peel)]
    peel = HybridParams(-axis, np.tile(-setpoint * normal, (n_peel, 1)), targets)
    state, ticks = track_hybrid(state, peel, gains)
    record(ticks)
    all_ticks.extend(ticks)
    return state, records, all_ticks


def scripted_expert(model: ZucchiniModel, target_force: float = 6.0,
                    strokes: int = 4, seed: int = 0, *,
                    cfg: ExpertConfig = None, gains: ControlGains = None,
                    render_stride: int = 0, cloud_size: int = 10_000,
                    raw_clouds: bool = False, camera=None, bounds=None):
    """Generate demonstration strokes around the cylinder.

    Setpoints are jittered within ``cfg.force_jitter`` of ``target_force``
    and stroke angles within a fraction of their slot. With
    ``render_stride > 0`` every that-many-th record also renders a depth
    frame and stores the preprocessed cloud, ready for chunking;
    ``raw_clouds`` keeps the full backprojection instead (the shape a real
    recording rig would log, before workspace cropping and voxelization).

    Returns ``(demos, final_model)``.

    Raises:
        ValidationError: setpoint outside the model's peel band.
    """
    cfg = cfg or ExpertConfig()
    gains = gains or ControlGains()
    if not model.f_lo < target_force < model.f_hi:
        raise ValidationError(
            f"target force {target_force} N outside the peel band "
            f"({model.f_lo}, {model.f_hi})")
    rng = np.random.default_rng(seed)
    intr, width, height, cam_pose = camera or default_camera()
    bounds = bounds or default_workspace()

    state = SimState(tool_pose=Pose(model.axis_point(1.5)), model=model)
    demos = []
    for k in range(max(strokes, 0)):
        slot = 2.0 * np.pi / max(strokes, 1)
        theta = slot * (k + cfg.angle_jitter * rng.uniform(-1.0, 1.0))
        lo = model.f_lo + 0.5 * cfg.force_jitter
        hi = model.f_hi - 0.5 * cfg.force_jitter
        setpoint = float(np.clip(
            target_force + cfg.force_jitter * rng.uniform(-1.0, 1.0), lo, hi))
        state, records, _ = run_scripted_stroke(state, theta, setpoint, cfg, gains)
        demo = Demo(
            times=np.array([r[0] for r in records]),
            poses=np.stack([r[1] for r in records]),
            wrenches=np.stack([r[2] for r in records]),
            setpoint=setpoint, theta=theta)
        if render_stride > 0:
            for i in range(0, len(records), render_stride):
                frame_state = SimState(tool_pose=Pose.from_array(demo.poses[i]),
                                       model=state.model, time=demo.times[i])
                frame = render_depth(frame_state, intr, width, height, cam_pose)
                cloud = backproject(frame)
                if not raw_clouds:
                    cloud = voxelize_to_count(
                        crop_workspace(cloud, bounds), cloud_size,
                        seed=int(rng.integers(2 ** 31 - 1)))
                demo.clouds[i] = cloud
        demos.append(demo)
    return demos, state.model


def run_scripted_episode(model: ZucchiniModel, seed: int = 0,
                         target_force: float = 6.0, *,
                         cfg: ExpertConfig = None, gains: ControlGains = None):
    """One closed-loop evaluation stroke; returns (final model, tick log)."""
    rng = np.random.default_rng(seed)
    theta = float(rng.uniform(0.0, 2.0 * np.pi))
    state = SimState(tool_pose=Pose(model.axis_point(1.5)), model=model)
    state, _, ticks = run_scripted_stroke(state, theta, target_force, cfg, gains)
    return state.model, ticks


def randomized_zucchini(rng, **kw) -> ZucchiniModel:
    """Fresh model with jittered stand position, yaw, and a small tilt."""
    shift = np.array([rng.uniform(-0.02, 0.02), rng.uniform(-0.02, 0.02), 0.0])
    yaw = quat_from_axis_angle([0.0, 0.0, 1.0], rng.uniform(0.0, 2.0 * np.pi))
    tilt_axis = np.array([np.cos(rng.uniform(0, 2 * np.pi)),
                          np.sin(rng.uniform(0, 2 * np.pi)), 0.0])
    tilt = quat_from_axis_angle(tilt_axis, rng.uniform(0.0, 0.05))
    pose = Pose(np.array([0.45, 0.0, 0.05]) + shift, quat_mul(tilt, yaw))
    return ZucchiniModel(pose=pose, **kw)


# ---------------------------------------------------------------------------
# demos -> training items
# ---------------------------------------------------------------------------

def action_row(pose7: np.ndarray, wrench6: np.ndarray) -> np.ndarray:
    return np.concatenate([pose7[:3], rot6d_from_quat(pose7[3:]), wrench6])


def demo_to_items(demo: Demo, horizon: int = 20, advance: int = 3,
                  history: int = 2, save_dir=None) -> list:
    """Chunk a rendered demo into (observation, action window) pairs.

    A pair starts at every cloud-bearing record index with a full horizon
    ahead; the action window leads the observation by ``advance`` steps to
    absorb perception latency. ``save_dir`` spills clouds to .pc3 files and
    references them by path instead of keeping arrays in memory.
    """
    if not demo.clouds:
        raise ValidationError("demo has no rendered clouds; chunking needs them")
    if advance < 0:
        raise ValidationError(f"advance must be >= 0, got {advance}")
    rows = np.stack([action_row(p, w) for p, w in zip(demo.poses, demo.wrenches)])
    items = []
    for i in sorted(demo.clouds):
        if i + advance + horizon > len(demo):
            continue
        past = [demo.poses[max(i - k, 0)] for k in range(history - 1, -1, -1)]
        item = TrainItem(history=np.stack(past),
                         actions=rows[i + advance:i + advance + horizon])
        if save_dir is None:
            item.cloud = demo.clouds[i]
        else:
            path = f"{save_dir}/cloud_{int(demo.times[i] * 1000):08d}_{i:05d}.pc3"
            save_pc3(path, demo.clouds[i])
            item.cloud_path = path
        items.append(item)
    return items


def make_policy_planner(params: PolicyParams, seed: int = 0,
                        cloud_size: int = None, camera=None, bounds=None):
    """Receding-horizon planner that renders, preprocesses, and samples the
    policy; plugs straight into ``control.run_episode``."""
    cfg = params.config
    intr, width, height, cam_pose = camera or default_camera()
    bounds = bounds or default_workspace()
    rng = np.random.default_rng(seed)
    size = cloud_size or cfg.cloud_size

    def plan(state, history):
        frame = render_depth(state, intr, width, height, cam_pose)
        cloud = crop_workspace(backproject(frame), bounds)
        cloud = voxelize_to_count(cloud, size, seed=int(rng.integers(2 ** 31 - 1)))
        obs = Observation(cloud=cloud, tcp_history=history[-cfg.history:])
        return sample_chunk(params, obs, seed=int(rng.integers(2 ** 31 - 1)))

    return plan
