"""Execution of predicted wrench-pose chunks with control primitives.

Each planning cycle turns an action chunk into one of two primitives:

* position: a Cartesian servo toward the chunk's pose targets, with no
  force regulation at all;
* hybrid: motion split by the stroke direction d-hat. Along d-hat the pose
  targets are tracked; in the orthogonal plane an admittance law servos the
  measured contact force toward the chunk's (orthogonalized) force targets.

The switch is a pure threshold rule on predicted force norms. The
controller is a deterministic state machine: every tick consumes a
simulator state snapshot and emits one twist command, so runs replay
exactly.

Sign convention everywhere: wrenches are what the tool exerts on the
environment. A source that reports the reaction on the tool instead can be
accommodated by flipping ``ControlGains.measured_sign``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateDirectionError,
    NoContactError,
    SafetyStopError,
    ValidationError,
)
from .sim import SimState, step
from .transforms import Pose, Wrench, quat_conj, quat_mul, quat_to_rotvec

_DIRECTION_UNIT_TOL = 1e-6     # |d| may deviate this much from 1 on input
_PARAM_UNIT_TOL = 1e-9         # HybridParams holds d to this tolerance
_DEGENERATE_DISP = 1e-6        # m, displacements below this have no direction


@dataclass
class ControlGains:
    """Gains and rates for both primitives.

    ``k_f`` converts force error to velocity, newtons to meters/second.
    ``ticks_per_step`` control ticks are spent on each trajectory step, so
    the step rate is ``1 / (tick_dt * ticks_per_step)``.
    """

    k_f: float = 0.002
    kp_pos: float = 10.0
    kp_rot: float = 10.0
    safety_force: float = 50.0
    tick_dt: float = 0.01
    ticks_per_step: int = 3
    press_speed: float = 0.005
    contact_threshold: float = 2.0
    press_timeout: float = 3.0
    measured_sign: float = 1.0


@dataclass
class PrimitiveChoice:
    kind: str
    executed_horizon: int = 10

    def __post_init__(self):
        if self.kind not in ("position", "hybrid"):
            raise ValidationError(f"unknown primitive kind {self.kind!r}")
        if not 1 <= self.executed_horizon <= 20:
            raise ValidationError(
                f"executed horizon must lie in [1, 20], got {self.executed_horizon}")


@dataclass
class HybridParams:
    """Per-cycle parameters of the hybrid primitive, base frame throughout."""

    direction: np.ndarray          # unit stroke direction d-hat
    ortho_forces: np.ndarray       # (n, 3) desired forces, each orthogonal to d-hat
    pose_targets: list             # n Poses
    press_force_threshold: float = 2.0

    def __post_init__(self):
        self.direction = np.asarray(self.direction, dtype=float).reshape(3)
        self.ortho_forces = np.asarray(self.ortho_forces, dtype=float).reshape(-1, 3)
        if abs(np.linalg.norm(self.direction) - 1.0) > _PARAM_UNIT_TOL:
            raise ValidationError("direction must be unit length within 1e-9")
        if len(self.pose_targets) != self.ortho_forces.shape[0]:
            raise ValidationError("one pose target per force row required")
        resid = np.abs(self.ortho_forces @ self.direction)
        bound = _PARAM_UNIT_TOL * np.linalg.norm(self.ortho_forces, axis=1)
        if np.any(resid > bound):
            raise ValidationError(
                "ortho_forces must be orthogonal to the stroke direction")


@dataclass
class TickRecord:
    """One controller tick, the unit of the rollout log."""

    time: float
    target: Pose
    pose: Pose
    wrench: Wrench
    primitive: str

    def as_dict(self) -> dict:
        return {
            "t": round(self.time, 9),
            "target": [float(x) for x in self.target.as_array()],
            "pose": [float(x) for x in self.pose.as_array()],
            "wrench": [float(x) for x in self.wrench.as_array()],
            "primitive": self.primitive,
        }


@dataclass
class ContactReport:
    travel: float
    final_force: float
    duration: float
    already_in_contact: bool = False


@dataclass
class EpisodeResult:
    status: str                    # completed | no-contact | safety-stop
    final_state: SimState
    ticks: list
    primitives: list = field(default_factory=list)

    def forces(self) -> np.ndarray:
        if not self.ticks:
            return np.zeros((0, 3))
        return np.stack([t.wrench.force for t in self.ticks])


# ---------------------------------------------------------------------------
# chunk analysis
# ---------------------------------------------------------------------------

def select_primitive(chunk, threshold: float = 6.0, consecutive: int = 3,
                     executed_horizon: int = 10) -> PrimitiveChoice:
    """Pick hybrid iff the predicted force norm stays above ``threshold``
    for at least ``consecutive`` successive steps of the executed horizon."""
    h = min(executed_horizon, len(chunk))
    norms = np.array([np.linalg.norm(w.force) for w in chunk.wrenches[:h]])
    run = 0
    for n in norms:
        run = run + 1 if n > threshold else 0
        if run >= consecutive:
            return PrimitiveChoice("hybrid", executed_horizon)
    return PrimitiveChoice("position", executed_horizon)


def motion_direction(poses, window: int = 10) -> np.ndarray:
    """Unit secant from the first to the last position of the window.

    Raises:
        DegenerateDirectionError: net displacement below 1e-6 m; the caller
            should fall back to the position primitive.
    """
    poses = list(poses)[:window]
    if len(poses) < 2:
        raise ValidationError("motion direction needs at least two poses")
    disp = poses[-1].position - poses[0].position
    norm = float(np.linalg.norm(disp))
    if norm <= _DEGENERATE_DISP:
        raise DegenerateDirectionError(
            f"window displacement {norm:.2e} m is too small for a direction")
    return disp / norm


def orthogonalize(force, direction) -> np.ndarray:
    """Remove the component of ``force`` along the unit ``direction``."""
    force = np.asarray(force, dtype=float).reshape(3)
    direction = np.asarray(direction, dtype=float).reshape(3)
    if abs(np.linalg.norm(direction) - 1.0) > _DIRECTION_UNIT_TOL:
        raise ValidationError("direction must be unit length within 1e-6")
    return force - np.dot(force, direction) * direction


def _measured_force_base(state: SimState, gains: ControlGains) -> np.ndarray:
    """Measured force rotated into the base frame, sign normalized to the
    exerted-on-environment convention."""
    return state.tool_pose.rotation() @ (gains.measured_sign
                                         * state.measured.force)


def _check_safety(state: SimState, gains: ControlGains, ticks=None):
    norm = float(np.linalg.norm(state.measured.force))
    if norm > gains.safety_force:
        err = SafetyStopError(
            f"measured force {norm:.1f} N exceeds the {gains.safety_force:.0f} N ceiling")
        # hand the caller's partial tick log to whoever catches the stop,
        # so aborted motions still show up in force plots and metrics
        err.ticks = [] if ticks is None else ticks
        raise err


def _servo_twist(state: SimState, target: Pose, gains: ControlGains) -> np.ndarray:
    v = gains.kp_pos * (target.position - state.tool_pose.position)
    q_err = quat_mul(target.quat, quat_conj(state.tool_pose.quat))
    omega = gains.kp_rot * quat_to_rotvec(q_err)
    return np.concatenate([v, omega])


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def press_to_contact(state: SimState, desired_force,
                     gains: ControlGains = None):
    """Creep along the desired applied-force direction until the surface
    pushes back.

    Returns ``(state, report, ticks)``. A state already in contact returns
    immediately with zero travel.

    Raises:
        NoContactError: nothing reached within the timeout. The ticks
            recorded up to the stop ride along on the exception's
            ``ticks`` attribute, as they do for SafetyStopError.
    """
    gains = gains or ControlGains()
    desired_force = np.asarray(desired_force, dtype=float).reshape(3)
    norm = float(np.linalg.norm(desired_force))
    if norm < 1e-12:
        raise ValidationError("press direction needs a nonzero desired force")
    if float(np.linalg.norm(state.measured.force)) >= gains.contact_threshold:
        report = ContactReport(0.0, float(np.linalg.norm(state.measured.force)),
                               0.0, already_in_contact=True)
        return state, report, []

    direction = desired_force / norm
    command = np.concatenate([gains.press_speed * direction, np.zeros(3)])
    start = state.tool_pose.position.copy()
    ticks = []
    elapsed = 0.0
    while elapsed < gains.press_timeout:
        state = step(state, command, gains.tick_dt)
        elapsed += gains.tick_dt
        ticks.append(TickRecord(state.time, state.tool_pose, state.tool_pose,
                                state.measured, "press"))
        _check_safety(state, gains, ticks)
        if float(np.linalg.norm(state.measured.force)) >= gains.contact_threshold:
            travel = float(np.linalg.norm(state.tool_pose.position - start))
            report = ContactReport(travel, float(np.linalg.norm(state.measured.force)),
                                   elapsed)
            return state, report, ticks
    err = NoContactError(
        f"no contact after pressing {gains.press_speed * elapsed * 1e3:.1f} mm "
        f"in {elapsed:.2f} s")
    err.ticks = ticks
    raise err


def track_hybrid(state: SimState, params: HybridParams,
                 gains: ControlGains = None):
    """Run the hybrid force-position law over the parameterized steps.

    Along the stroke direction the pose targets are position-servoed (as is
    orientation); in the orthogonal plane the admittance law
    ``v = k_f * (F_desired - F_measured)`` regulates contact force.

    Returns ``(state, ticks)``.

    Raises:
        SafetyStopError: measured force norm exceeded the ceiling; the
            ticks up to the stop ride along on the exception's ``ticks``.
    """
    gains = gains or ControlGains()
    d = params.direction
    ticks = []
    for target, f_des in zip(params.pose_targets, params.ortho_forces):
        for _ in range(gains.ticks_per_step):
            f_perp = orthogonalize(_measured_force_base(state, gains), d)
            v_force = gains.k_f * (f_des - f_perp)
            v_force -= np.dot(v_force, d) * d
            servo = _servo_twist(state, target, gains)
            v_pos = np.dot(servo[:3], d) * d
            command = np.concatenate([v_pos + v_force, servo[3:]])
            state = step(state, command, gains.tick_dt)
            ticks.append(TickRecord(state.time, target, state.tool_pose,
                                    state.measured, "hybrid"))
            _check_safety(state, gains, ticks)
    return state, ticks


def track_position(state: SimState, poses, gains: ControlGains = None):
    """Plain Cartesian servo through ``poses``; forces are whatever the
    environment returns.

    Returns ``(state, ticks)``.

    Raises:
        SafetyStopError: measured force norm exceeded the ceiling; the
            ticks up to the stop ride along on the exception's ``ticks``.
    """
    gains = gains or ControlGains()
    ticks = []
    for target in poses:
        for _ in range(gains.ticks_per_step):
            state = step(state, _servo_twist(state, target, gains), gains.tick_dt)
            ticks.append(TickRecord(state.time, target, state.tool_pose,
                                    state.measured, "position"))
            _check_safety(state, gains, ticks)
    return state, ticks


# ---------------------------------------------------------------------------
# receding-horizon episode loop
# ---------------------------------------------------------------------------

def _chunk_forces_base(chunk, horizon: int) -> np.ndarray:
    """Chunk wrenches are tcp frame; express each step's force in base using
    that step's own predicted orientation."""
    rows = []
    for pose, wrench in zip(chunk.poses[:horizon], chunk.wrenches[:horizon]):
        rows.append(pose.rotation() @ wrench.force)
    return np.stack(rows)


def run_episode(state: SimState, planner, gains: ControlGains = None, *,
                cycles: int = 20, executed_horizon: int = 10,
                threshold: float = 6.0, consecutive: int = 3) -> EpisodeResult:
    """Receding-horizon rollout: plan a chunk, execute its first
    ``executed_horizon`` steps with the selected primitive, repeat.

    ``planner(state, history)`` returns the next ActionChunk or None to
    stop; ``history`` is the recent tool poses, oldest first, as an
    (n, 7) array. A press timeout or safety stop ends the episode with the
    corresponding status instead of raising; the tick log keeps everything
    recorded up to and including the stop.
    """
    gains = gains or ControlGains()
    history = [state.tool_pose.as_array()] * 2
    ticks = []
    primitives = []
    status = "completed"
    for _ in range(cycles):
        chunk = planner(state, np.stack(history))
        if chunk is None:
            break
        choice = select_primitive(chunk, threshold, consecutive, executed_horizon)
        horizon = min(choice.executed_horizon, len(chunk))
        kind = choice.kind
        direction = None
        if kind == "hybrid":
            try:
                direction = motion_direction(chunk.poses, window=horizon)
            except DegenerateDirectionError:
                kind = "position"
        try:
            if kind == "hybrid":
                forces = _chunk_forces_base(chunk, horizon)
                ortho = np.stack([orthogonalize(orthogonalize(f, direction), direction)
                                  for f in forces])
                params = HybridParams(direction, ortho, chunk.poses[:horizon],
                                      press_force_threshold=gains.contact_threshold)
                state, _, press_ticks = press_to_contact(state, ortho[0], gains)
                ticks.extend(press_ticks)
                state, run_ticks = track_hybrid(state, params, gains)
            else:
                state, run_ticks = track_position(state, chunk.poses[:horizon], gains)
        except NoContactError as err:
            ticks.extend(getattr(err, "ticks", []))
            status = "no-contact"
            primitives.append(kind)
            break
        except SafetyStopError as err:
            ticks.extend(getattr(err, "ticks", []))
            status = "safety-stop"
            primitives.append(kind)
            break
        ticks.extend(run_ticks)
        primitives.append(kind)
        history.append(state.tool_pose.as_array())
        history = history[-2:]
    return EpisodeResult(status, state, ticks, primitives)


def replay_planner(chunks):
    """Planner that replays a fixed chunk sequence, then stops."""
    queue = list(chunks)

    def plan(state, history):
        return queue.pop(0) if queue else None

    return plan
