"""Compliant peeling environment.

A rigid cylinder ("the zucchini") stands on a table; a blade tool presses
into its skin and slides along the axis. Contact is a penalty model: normal
force k_n * depth + b_n * depth-rate, clamped at zero, plus Coulomb-style
drag opposing the sliding direction. The skin is a cell grid over
(angle, axial position); cells swept at moderate force peel off, cells hit
too hard are damaged, and both transitions are permanent.

Everything here is deterministic and side-effect free: `step` maps one
state to the next and never mutates its input (cell grids are copied on
write), so identical command sequences replay bit for bit.

The depth renderer is an analytic ray caster over the floor plane, the
cylinder, and the tool housing box. It exists to feed the perception
pipeline plausible geometry, not to look pretty.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .cloud import Box, DepthFrame, Intrinsics
from .errors import ValidationError
from .transforms import Frame, Pose, Wrench, inverse, mat_to_quat, quat_from_axis_angle, quat_mul

INTACT = np.int8(0)
PEELED = np.int8(1)
DAMAGED = np.int8(2)

_MIN_SLIDE_SPEED = 1e-3  # m/s of tangential motion below which nothing peels
_MAX_RAY_RANGE = 2.0     # m, renderer returns beyond this count as no hit


# ---------------------------------------------------------------------------
# scene bodies
# ---------------------------------------------------------------------------

@dataclass
class PeelerTool:
    """Straight blade edge rigidly attached to the tool frame.

    The cutting edge runs along tool x through the origin and tool +z is
    the pressing direction. ``body_center``/``body_half_extents`` describe
    the housing box the depth renderer draws behind the edge.
    """

    half_width: float = 0.010
    n_samples: int = 33
    body_center: tuple = (0.0, 0.0, -0.018)
    body_half_extents: tuple = (0.012, 0.004, 0.018)

    def edge_points(self) -> np.ndarray:
        pts = np.zeros((self.n_samples, 3))
        pts[:, 0] = np.linspace(-self.half_width, self.half_width, self.n_samples)
        return pts


@dataclass
class ZucchiniModel:
    """Compliant-skinned cylinder; local +z is the axis, z in [0, length].

    ``cells`` is the (n_angular, n_axial) skin grid of INTACT / PEELED /
    DAMAGED markers. Peeling requires the normal force inside [f_lo, f_hi]
    and actual sliding; anything above ``damage_threshold`` wounds the
    flesh instead.
    """

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
    pose: Pose = None
    cells: np.ndarray = None

    def __post_init__(self):
        if min(self.radius, self.length, self.k_n) <= 0.0:
            raise ValidationError("radius, length and k_n must all be positive")
        if not (self.f_lo < self.f_hi < self.damage_threshold):
            raise ValidationError(
                f"need f_lo < f_hi < damage threshold, got "
                f"({self.f_lo}, {self.f_hi}, {self.damage_threshold})")
        if self.pose is None:
            self.pose = Pose(np.array([0.45, 0.0, 0.05]))
        if self.cells is None:
            self.cells = np.full((self.n_angular, self.n_axial), INTACT, dtype=np.int8)

    def axis_point(self, frac: float) -> np.ndarray:
        """Base-frame point on the axis at ``frac`` of the length."""
        return self.pose.apply(np.array([0.0, 0.0, frac * self.length]))

    def cell_indices(self, local: np.ndarray) -> np.ndarray:
        theta = np.arctan2(local[:, 1], local[:, 0])
        ai = np.floor((theta + np.pi) / (2.0 * np.pi) * self.n_angular).astype(np.intp)
        ai = np.clip(ai, 0, self.n_angular - 1)  # theta == +pi lands past the seam
        zi = np.floor(local[:, 2] / self.length * self.n_axial).astype(np.intp)
        zi = np.clip(zi, 0, self.n_axial - 1)
        return np.stack([ai, zi], axis=1)

    def contact(self, points: np.ndarray):
        """Deepest penetration of base-frame ``points`` into the skin.

        Returns (depth, outward unit normal, deepest point, cell indices of
        every penetrating point). Depth 0 means no contact.
        """
        local = inverse(self.pose).apply_batch(points)
        rho = np.hypot(local[:, 0], local[:, 1])
        inside = (rho < self.radius) & (local[:, 2] >= 0.0) & (local[:, 2] <= self.length)
        if not inside.any():
            return 0.0, np.zeros(3), np.zeros(3), np.empty((0, 2), dtype=np.intp)
        depth = np.where(inside, self.radius - rho, 0.0)
        i = int(np.argmax(depth))
        n_local = np.array([local[i, 0], local[i, 1], 0.0])
        nn = np.linalg.norm(n_local)
        # a sample exactly on the axis has no defined radial direction
        n_local = n_local / nn if nn > 1e-12 else np.array([1.0, 0.0, 0.0])
        return (float(depth[i]), self.pose.rotation() @ n_local, points[i],
                self.cell_indices(local[inside]))

    def after_sweep(self, cells: np.ndarray, normal_force: float,
                    tangential_speed: float) -> "ZucchiniModel":
        """Model after one contact tick; copy-on-write, never in place.

        Cell transitions are monotone: INTACT -> PEELED -> DAMAGED, and
        DAMAGED is terminal.
        """
        if cells.shape[0] == 0 or normal_force <= 0.0:
            return self
        damage = normal_force > self.damage_threshold
        peel = (self.f_lo <= normal_force <= self.f_hi
                and tangential_speed > _MIN_SLIDE_SPEED)
        if not (damage or peel):
            return self
        ai, zi = cells[:, 0], cells[:, 1]
        current = self.cells[ai, zi]
        changed = (current != DAMAGED) if damage else (current == INTACT)
        if not changed.any():
            return self
        grid = self.cells.copy()
        grid[ai[changed], zi[changed]] = DAMAGED if damage else PEELED
        return replace(self, cells=grid)


@dataclass
class CompliantPlane:
    """Infinite horizontal surface at ``height`` with outward normal +z.

    Analytic stand-in for the cylinder in controller tests: same contact
    interface and stiffness fields, no skin cells.
    """

    height: float = 0.0
    k_n: float = 2000.0
    b_n: float = 10.0
    mu: float = 0.0

    def contact(self, points: np.ndarray):
        depth = self.height - points[:, 2]
        i = int(np.argmax(depth))
        if depth[i] <= 0.0:
            return 0.0, np.zeros(3), np.zeros(3), np.empty((0, 2), dtype=np.intp)
        return float(depth[i]), np.array([0.0, 0.0, 1.0]), points[i], \
            np.empty((0, 2), dtype=np.intp)

    def after_sweep(self, cells, normal_force, tangential_speed):
        return self


@dataclass
class SimState:
    """One snapshot of the environment.

    ``measured`` follows the repo sign convention: the wrench the tool
    exerts on the environment, expressed in the tool (tcp) frame.
    ``prev_penetration`` carries the depth of the previous tick so the
    damping term can difference it.
    """

    tool_pose: Pose
    model: object
    tool: PeelerTool = field(default_factory=PeelerTool)
    time: float = 0.0
    tool_velocity: np.ndarray = field(default_factory=lambda: np.zeros(6))
    measured: Wrench = None
    prev_penetration: float = 0.0

    def __post_init__(self):
        if self.measured is None:
            self.measured = Wrench(np.zeros(3), np.zeros(3), Frame.TCP)
        arr = self.measured.as_array()
        if not np.all(np.isfinite(arr)):
            raise ValidationError("measured wrench must be finite")


# ---------------------------------------------------------------------------
# dynamics
# ---------------------------------------------------------------------------

def step(state: SimState, command, dt: float = 0.01) -> SimState:
    """Advance one tick under a commanded tool twist.

    ``command`` is a base-frame 6-vector (linear velocity, angular
    velocity). The tool is kinematic: the command integrates directly, and
    contact produces force without pushing the tool back.
    """
    command = np.asarray(command, dtype=float).reshape(6)
    if not np.all(np.isfinite(command)):
        raise ValidationError("commanded twist has non-finite entries")
    if not 0.0 < dt <= 0.05:
        raise ValidationError(f"dt must lie in (0, 0.05], got {dt}")

    v, omega = command[:3], command[3:]
    position = state.tool_pose.position + v * dt
    w_norm = float(np.linalg.norm(omega))
    quat = state.tool_pose.quat
    if w_norm > 0.0:
        quat = quat_mul(quat_from_axis_angle(omega, w_norm * dt), quat)
    pose = Pose(position, quat)

    depth, normal, contact_point, cells = state.model.contact(
        pose.apply_batch(state.tool.edge_points()))

    if depth > 0.0:
        depth_rate = (depth - state.prev_penetration) / dt
        f_n = max(0.0, state.model.k_n * depth + state.model.b_n * depth_rate)
        v_contact = v + np.cross(omega, contact_point - position)
        v_tan = v_contact - np.dot(v_contact, normal) * normal
        slide_speed = float(np.linalg.norm(v_tan))
        # force on the environment: push along -normal, drag along sliding
        f_applied = -f_n * normal
        if slide_speed > 1e-9:
            f_applied += state.model.mu * f_n * (v_tan / slide_speed)
        tau_applied = np.cross(contact_point - position, f_applied)
        rot = pose.rotation()
        measured = Wrench(rot.T @ f_applied, rot.T @ tau_applied, Frame.TCP)
        model = state.model.after_sweep(cells, f_n, slide_speed)
    else:
        measured = Wrench(np.zeros(3), np.zeros(3), Frame.TCP)
        model = state.model

    return SimState(tool_pose=pose, model=model, tool=state.tool,
                    time=state.time + dt, tool_velocity=command.copy(),
                    measured=measured, prev_penetration=depth)


# ---------------------------------------------------------------------------
# peel-strip bookkeeping
# ---------------------------------------------------------------------------

@dataclass
class PeelStrip:
    """One connected run of peeled cells.

    ``length`` is the axial extent in meters (strips are produced by axial
    strokes, so the useful size is how far along the axis they reach).
    """

    cells: np.ndarray  # (k, 2) rows of (angular, axial) indices, lex sorted
    length: float
    continuous: bool = True


def peel_strips(model: ZucchiniModel) -> list:
    """Connected components of peeled cells, longest first.

    4-neighborhood with angular wrap-around, implemented with union-find
    (the test oracle uses an independent BFS).
    """
    peeled = model.cells == PEELED
    coords = np.argwhere(peeled)
    if coords.shape[0] == 0:
        return []
    n_ang, n_ax = model.cells.shape
    index = -np.ones((n_ang, n_ax), dtype=np.intp)
    index[coords[:, 0], coords[:, 1]] = np.arange(coords.shape[0])
    parent = np.arange(coords.shape[0])

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, (a, z) in enumerate(coords):
        if z + 1 < n_ax and peeled[a, z + 1]:
            ra, rb = find(i), find(index[a, z + 1])
            if ra != rb:
                parent[rb] = ra
        an = (a + 1) % n_ang
        if peeled[an, z]:
            ra, rb = find(i), find(index[an, z])
            if ra != rb:
                parent[rb] = ra

    roots = np.array([find(i) for i in range(coords.shape[0])])
    cell_height = model.length / model.n_axial
    strips = []
    for r in np.unique(roots):
        comp = coords[roots == r]
        comp = comp[np.lexsort((comp[:, 0], comp[:, 1]))]
        extent = (comp[:, 1].max() - comp[:, 1].min() + 1) * cell_height
        strips.append(PeelStrip(cells=comp, length=float(extent)))
    strips.sort(key=lambda s: -s.length)
    return strips


def max_continuous_strip(model: ZucchiniModel) -> float:
    strips = peel_strips(model)
    return strips[0].length if strips else 0.0


def evaluate(model: ZucchiniModel, forces: np.ndarray,
             contact_threshold: float = 2.0) -> dict:
    """Episode metrics from the final skin grid and the measured force log.

    ``forces`` is (n, 3) measured tool forces (any fixed frame; only norms
    matter). The contact phase is every sample with norm at or above
    ``contact_threshold``.
    """
    forces = np.asarray(forces, dtype=float).reshape(-1, 3)
    norms = np.linalg.norm(forces, axis=1)
    in_contact = norms >= contact_threshold
    damaged = int(np.count_nonzero(model.cells == DAMAGED))
    peeled = int(np.count_nonzero(model.cells == PEELED))
    strip = max_continuous_strip(model)
    motion_correct = peeled >= 1 and damaged == 0
    return {
        "motion_correct": motion_correct,
        "success_10cm": motion_correct and strip > 0.10,
        "max_continuous_strip": strip,
        "mean_contact_force": float(norms[in_contact].mean()) if in_contact.any() else 0.0,
        "peak_force": float(norms.max()) if norms.size else 0.0,
        "contact_fraction": float(in_contact.mean()) if norms.size else 0.0,
        "peeled_cells": peeled,
        "damaged_cells": damaged,
    }


# ---------------------------------------------------------------------------
# depth rendering
# ---------------------------------------------------------------------------

def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera pose at ``eye`` with +z through ``target`` (pinhole forward)."""
    eye = np.asarray(eye, dtype=float)
    fwd = np.asarray(target, dtype=float) - eye
    nf = np.linalg.norm(fwd)
    if nf < 1e-12:
        raise ValidationError("camera eye and target coincide")
    fwd = fwd / nf
    right = np.cross(fwd, np.asarray(up, dtype=float))
    nr = np.linalg.norm(right)
    if nr < 1e-12:
        raise ValidationError("camera forward is parallel to the up vector")
    right = right / nr
    down = np.cross(fwd, right)
    return Pose(eye, mat_to_quat(np.stack([right, down, fwd], axis=1)))


def default_camera() -> tuple:
    """Fixed scene camera: small image, looking at the stand from the side.

    The low resolution is deliberate: it keeps every rendered cloud below
    the policy's input size, so resizing is always the cheap duplication
    path rather than a voxel-edge search.
    """
    intr = Intrinsics(fx=70.0, fy=70.0, cx=39.5, cy=29.5)
    return intr, 80, 60, look_at(eye=(0.15, -0.25, 0.40), target=(0.45, 0.0, 0.14))


def default_workspace() -> Box:
    """Crop box around the stand: floor and far clutter fall outside."""
    return Box(lo=(0.30, -0.20, 0.02), hi=(0.62, 0.20, 0.42))


def _ray_cylinder(o, d, model: ZucchiniModel):
    """Smallest positive ray parameter hitting the closed cylinder, or inf."""
    inv = inverse(model.pose)
    rot = inv.rotation()
    ol = o @ rot.T + inv.position
    dl = d @ rot.T
    t_best = np.full(o.shape[0] if o.ndim > 1 else d.shape[0], np.inf)

    a = dl[:, 0] ** 2 + dl[:, 1] ** 2
    b = 2.0 * (ol[:, 0] * dl[:, 0] + ol[:, 1] * dl[:, 1])
    c = ol[:, 0] ** 2 + ol[:, 1] ** 2 - model.radius ** 2
    disc = b * b - 4.0 * a * c
    ok = (disc >= 0.0) & (a > 1e-16)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    for sign in (-1.0, 1.0):
        t = np.where(ok, (-b + sign * sq) / (2.0 * a), np.inf)
        z = ol[:, 2] + t * dl[:, 2]
        hit = ok & (t > 0.0) & (z >= 0.0) & (z <= model.length)
        t_best = np.where(hit & (t < t_best), t, t_best)

    # end caps
    for z_cap in (0.0, model.length):
        moving = np.abs(dl[:, 2]) > 1e-16
        t = np.where(moving, (z_cap - ol[:, 2]) / dl[:, 2], np.inf)
        x = ol[:, 0] + t * dl[:, 0]
        y = ol[:, 1] + t * dl[:, 1]
        hit = moving & (t > 0.0) & (x * x + y * y <= model.radius ** 2)
        t_best = np.where(hit & (t < t_best), t, t_best)
    return t_best


def _ray_box(o, d, pose: Pose, center, half_extents):
    """Slab test against an oriented box; inf where the ray misses."""
    inv = inverse(pose)
    rot = inv.rotation()
    ol = o @ rot.T + inv.position - np.asarray(center, dtype=float)
    dl = d @ rot.T
    he = np.asarray(half_extents, dtype=float)
    t_lo = np.full(dl.shape[0], -np.inf)
    t_hi = np.full(dl.shape[0], np.inf)
    miss = np.zeros(dl.shape[0], dtype=bool)
    for k in range(3):
        moving = np.abs(dl[:, k]) > 1e-16
        t1 = np.where(moving, (-he[k] - ol[:, k]) / dl[:, k], -np.inf)
        t2 = np.where(moving, (he[k] - ol[:, k]) / dl[:, k], np.inf)
        lo = np.minimum(t1, t2)
        hi = np.maximum(t1, t2)
        t_lo = np.maximum(t_lo, lo)
        t_hi = np.minimum(t_hi, hi)
        miss |= ~moving & (np.abs(ol[:, k]) > he[k])
    t = np.where((~miss) & (t_hi >= np.maximum(t_lo, 0.0)),
                 np.maximum(t_lo, 0.0), np.inf)
    # a camera inside the box would report t == 0; treat as miss
    return np.where(t > 0.0, t, np.inf)


def render_depth(state: SimState, intrinsics: Intrinsics, width: int, height: int,
                 camera_pose: Pose, floor_height: float = 0.0) -> DepthFrame:
    """Ray-cast depth image of floor + cylinder + tool housing.

    Depth is the camera-frame z of the nearest hit (what a pinhole depth
    sensor reports); pixels with no hit inside range carry zero.
    """
    uu, vv = np.meshgrid(np.arange(width, dtype=float),
                         np.arange(height, dtype=float))
    dirs_cam = np.stack([
        (uu.ravel() - intrinsics.cx) / intrinsics.fx,
        (vv.ravel() - intrinsics.cy) / intrinsics.fy,
        np.ones(width * height),
    ], axis=1)
    rot = camera_pose.rotation()
    d = dirs_cam @ rot.T
    o = np.broadcast_to(camera_pose.position, d.shape)

    t_best = np.full(d.shape[0], np.inf)
    descending = d[:, 2] < -1e-16
    t_floor = np.where(descending,
                       (floor_height - camera_pose.position[2]) / d[:, 2], np.inf)
    t_best = np.minimum(t_best, np.where(t_floor > 0.0, t_floor, np.inf))
    if isinstance(state.model, ZucchiniModel):
        t_best = np.minimum(t_best, _ray_cylinder(o, d, state.model))
    elif isinstance(state.model, CompliantPlane):
        plane_hit = np.where(descending,
                             (state.model.height - camera_pose.position[2]) / d[:, 2],
                             np.inf)
        t_best = np.minimum(t_best, np.where(plane_hit > 0.0, plane_hit, np.inf))
    t_best = np.minimum(t_best, _ray_box(o, d, state.tool_pose,
                                         state.tool.body_center,
                                         state.tool.body_half_extents))

    # dirs have unit camera z, so the ray parameter IS the camera depth
    depth = np.where(np.isfinite(t_best) & (t_best <= _MAX_RAY_RANGE), t_best, 0.0)
    return DepthFrame(depth.reshape(height, width), intrinsics, camera_pose)
