import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forcepeel.errors import FrameError, NormalizationError, StreamError
from forcepeel.transforms import (
    Frame,
    Pose,
    TimedStream,
    Wrench,
    compose,
    inverse,
    mat_to_quat,
    pose_interp,
    quat_from_axis_angle,
    quat_from_rot6d,
    quat_mul,
    quat_normalize,
    quat_rotate,
    quat_slerp,
    quat_to_mat,
    quat_to_rotvec,
    resample,
    rot6d_from_quat,
    skew,
    transform_wrench,
    wrench_add,
    wrench_sub,
)

HALF_SQRT2 = np.sqrt(0.5)
ROT_Z_90 = np.array([HALF_SQRT2, 0.0, 0.0, HALF_SQRT2])


def random_quat(rng):
    q = rng.standard_normal(4)
    return quat_normalize(q / np.linalg.norm(q))


def random_pose(rng):
    return Pose(rng.uniform(-2, 2, 3), random_quat(rng))


quat_strategy = st.builds(
    lambda seed: random_quat(np.random.default_rng(seed)),
    st.integers(0, 2**32 - 1),
)
pose_strategy = st.builds(
    lambda seed: random_pose(np.random.default_rng(seed)),
    st.integers(0, 2**32 - 1),
)


# ---------------------------------------------------------------------------
# quaternions
# ---------------------------------------------------------------------------

def test_quat_normalize_canonicalizes_sign():
    q = quat_normalize(-ROT_Z_90)
    assert q[0] > 0.0
    np.testing.assert_allclose(q, ROT_Z_90, atol=1e-15)
    # w == 0 ties break on the first nonzero component
    q = quat_normalize([0.0, 0.0, -1.0, 0.0])
    np.testing.assert_allclose(q, [0.0, 0.0, 1.0, 0.0], atol=1e-15)


def test_quat_normalize_rejects_bad_norm():
    with pytest.raises(NormalizationError):
        quat_normalize([1.0, 1.0, 0.0, 0.0])


def test_quat_rotate_z90_sends_x_to_y():
    v = quat_rotate(ROT_Z_90, np.array([1.0, 0.0, 0.0]))
    np.testing.assert_allclose(v, [0.0, 1.0, 0.0], atol=1e-12)


def test_quat_to_mat_round_trip_against_axis_angle():
    q = quat_from_axis_angle([1.0, 2.0, -0.5], 1.234)
    np.testing.assert_allclose(mat_to_quat(quat_to_mat(q)), q, atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(quat_strategy, quat_strategy)
def test_quat_mul_matches_matrix_product(qa, qb):
    np.testing.assert_allclose(
        quat_to_mat(quat_mul(qa, qb)), quat_to_mat(qa) @ quat_to_mat(qb), atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(quat_strategy)
def test_mat_to_quat_inverts_quat_to_mat(q):
    np.testing.assert_allclose(mat_to_quat(quat_to_mat(q)), q, atol=1e-9)


def test_slerp_midpoint_of_z_rotation():
    # halfway between identity and a 90 degree z rotation is 45 degrees:
    # (cos(pi/8), 0, 0, sin(pi/8))
    q = quat_slerp(np.array([1.0, 0.0, 0.0, 0.0]), ROT_Z_90, 0.5)
    np.testing.assert_allclose(
        q, [0.9238795325112867, 0.0, 0.0, 0.3826834323650898], atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(quat_strategy, quat_strategy)
def test_slerp_returns_exact_endpoints(q0, q1):
    np.testing.assert_allclose(quat_slerp(q0, q1, 0.0), q0, atol=1e-12)
    np.testing.assert_allclose(quat_slerp(q0, q1, 1.0), q1, atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(quat_strategy, quat_strategy, st.floats(0.0, 1.0))
def test_slerp_output_is_unit_and_canonical(q0, q1, u):
    q = quat_slerp(q0, q1, u)
    assert abs(np.linalg.norm(q) - 1.0) < 1e-9
    assert q[0] >= 0.0


def test_slerp_takes_shortest_arc():
    # 170 degrees about z, interpolated from identity: the midpoint must be
    # at 85 degrees, not at -95.
    q1 = quat_from_axis_angle([0, 0, 1], np.deg2rad(170.0))
    mid = quat_slerp(np.array([1.0, 0.0, 0.0, 0.0]), q1, 0.5)
    expected = quat_from_axis_angle([0, 0, 1], np.deg2rad(85.0))
    np.testing.assert_allclose(mid, expected, atol=1e-12)


def test_skew_matches_cross_product():
    a = np.array([1.0, -2.0, 3.0])
    b = np.array([0.5, 4.0, -1.0])
    np.testing.assert_allclose(skew(a) @ b, np.cross(a, b), atol=1e-15)


# ---------------------------------------------------------------------------
# 6D rotation coding
# ---------------------------------------------------------------------------

def test_rot6d_of_z90_is_first_two_columns():
    np.testing.assert_allclose(
        rot6d_from_quat(ROT_Z_90), [0.0, 1.0, 0.0, -1.0, 0.0, 0.0], atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(quat_strategy)
def test_rot6d_round_trip(q):
    np.testing.assert_allclose(quat_from_rot6d(rot6d_from_quat(q)), q, atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_rot6d_decode_orthonormalizes_noisy_input(seed):
    rng = np.random.default_rng(seed)
    r6 = rot6d_from_quat(random_quat(rng)) + rng.normal(0, 0.05, 6)
    m = quat_to_mat(quat_from_rot6d(r6))
    np.testing.assert_allclose(m.T @ m, np.eye(3), atol=1e-9)
    assert np.linalg.det(m) > 0.0


# ---------------------------------------------------------------------------
# poses
# ---------------------------------------------------------------------------

def test_compose_frozen_case():
    # T1 rotates 90 deg about z then shifts +x; T2 shifts +y.
    # T1 * T2 sends the child origin to R1*(0,1,0) + (1,0,0) = (0,0,0).
    t1 = Pose([1.0, 0.0, 0.0], ROT_Z_90)
    t2 = Pose([0.0, 1.0, 0.0], [1.0, 0.0, 0.0, 0.0])
    c = compose(t1, t2)
    np.testing.assert_allclose(c.position, [0.0, 0.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(c.quat, ROT_Z_90, atol=1e-12)


def test_inverse_frozen_case():
    # inverse of (p=(1,2,3), Rz(90)): R' = Rz(-90), p' = -R' p = (-2, 1, -3)
    t = Pose([1.0, 2.0, 3.0], ROT_Z_90)
    ti = inverse(t)
    np.testing.assert_allclose(ti.position, [-2.0, 1.0, -3.0], atol=1e-12)
    np.testing.assert_allclose(ti.quat, [HALF_SQRT2, 0.0, 0.0, -HALF_SQRT2], atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(pose_strategy, pose_strategy, pose_strategy)
def test_compose_is_associative(a, b, c):
    lhs = compose(compose(a, b), c)
    rhs = compose(a, compose(b, c))
    np.testing.assert_allclose(lhs.position, rhs.position, atol=1e-9)
    np.testing.assert_allclose(lhs.quat, rhs.quat, atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(pose_strategy)
def test_inverse_composes_to_identity(p):
    ident = compose(p, inverse(p))
    np.testing.assert_allclose(ident.position, np.zeros(3), atol=1e-9)
    np.testing.assert_allclose(ident.quat, [1.0, 0.0, 0.0, 0.0], atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(pose_strategy, pose_strategy, st.integers(0, 2**32 - 1))
def test_compose_matches_point_mapping(a, b, seed):
    pt = np.random.default_rng(seed).uniform(-1, 1, 3)
    np.testing.assert_allclose(compose(a, b).apply(pt), a.apply(b.apply(pt)), atol=1e-9)


def test_pose_quat_is_canonical_after_ops():
    rng = np.random.default_rng(7)
    for _ in range(50):
        p = compose(random_pose(rng), random_pose(rng))
        assert p.quat[0] >= 0.0
        assert abs(np.linalg.norm(p.quat) - 1.0) < 1e-9


def test_pose_interp_endpoints_and_midpoint():
    a = Pose([0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0])
    b = Pose([1.0, 0.0, 0.0], ROT_Z_90)
    np.testing.assert_allclose(pose_interp(a, b, 0.0).as_array(), a.as_array(), atol=1e-12)
    np.testing.assert_allclose(pose_interp(a, b, 1.0).as_array(), b.as_array(), atol=1e-12)
    mid = pose_interp(a, b, 0.5)
    np.testing.assert_allclose(mid.position, [0.5, 0.0, 0.0], atol=1e-12)


# ---------------------------------------------------------------------------
# wrenches
# ---------------------------------------------------------------------------

def test_wrench_add_requires_same_frame():
    a = Wrench([1, 0, 0], [0, 0, 0], Frame.SENSOR)
    b = Wrench([1, 0, 0], [0, 0, 0], Frame.TCP)
    with pytest.raises(FrameError):
        wrench_add(a, b)
    with pytest.raises(FrameError):
        wrench_sub(a, b)


def test_wrench_add_same_frame():
    a = Wrench([1, 2, 3], [0.1, 0.0, 0.0], Frame.TCP)
    b = Wrench([-1, 0, 1], [0.0, 0.2, 0.0], Frame.TCP)
    s = wrench_add(a, b)
    np.testing.assert_allclose(s.force, [0, 2, 4])
    np.testing.assert_allclose(s.torque, [0.1, 0.2, 0.0])
    assert s.frame == Frame.TCP


def test_transform_wrench_pure_translation_lever_arm():
    # 10 N along x at a frame displaced 0.1 m along z picks up 1 N m about y
    w = Wrench([10.0, 0.0, 0.0], [0.0, 0.0, 0.0], Frame.TCP)
    shift = Pose([0.0, 0.0, 0.1], [1.0, 0.0, 0.0, 0.0])
    out = transform_wrench(w, shift, from_frame=Frame.TCP, to_frame=Frame.BASE)
    np.testing.assert_allclose(out.force, [10.0, 0.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(out.torque, [0.0, 1.0, 0.0], atol=1e-12)
    assert out.frame == Frame.BASE


def test_transform_wrench_pure_rotation():
    w = Wrench([1.0, 2.0, 3.0], [0.1, 0.0, 0.0], Frame.SENSOR)
    rot = Pose([0.0, 0.0, 0.0], ROT_Z_90)
    out = transform_wrench(w, rot, from_frame=Frame.SENSOR, to_frame=Frame.TCP)
    np.testing.assert_allclose(out.force, [-2.0, 1.0, 3.0], atol=1e-12)
    np.testing.assert_allclose(out.torque, [0.0, 0.1, 0.0], atol=1e-12)


def test_transform_wrench_rotation_plus_offset():
    # force (10,0,0) rotated 90 deg about z becomes (0,10,0); the 0.1 m z
    # offset adds torque (0,0,0.1) x (0,10,0) = (-1, 0, 0)
    w = Wrench([10.0, 0.0, 0.0], [0.0, 0.0, 0.0], Frame.SENSOR)
    t = Pose([0.0, 0.0, 0.1], ROT_Z_90)
    out = transform_wrench(w, t, from_frame=Frame.SENSOR, to_frame=Frame.BASE)
    np.testing.assert_allclose(out.force, [0.0, 10.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(out.torque, [-1.0, 0.0, 0.0], atol=1e-12)


def test_transform_wrench_frame_mismatch_raises():
    w = Wrench([1, 0, 0], [0, 0, 0], Frame.BASE)
    with pytest.raises(FrameError):
        transform_wrench(w, Pose(), from_frame=Frame.SENSOR, to_frame=Frame.TCP)


@settings(max_examples=200, deadline=None)
@given(pose_strategy, st.integers(0, 2**32 - 1))
def test_transform_wrench_round_trip(t, seed):
    rng = np.random.default_rng(seed)
    w = Wrench(rng.uniform(-10, 10, 3), rng.uniform(-1, 1, 3), Frame.SENSOR)
    there = transform_wrench(w, t, from_frame=Frame.SENSOR, to_frame=Frame.BASE)
    back = transform_wrench(there, inverse(t), from_frame=Frame.BASE, to_frame=Frame.SENSOR)
    np.testing.assert_allclose(back.force, w.force, atol=1e-9)
    np.testing.assert_allclose(back.torque, w.torque, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(pose_strategy, pose_strategy, st.integers(0, 2**32 - 1))
def test_transform_wrench_composes(a, b, seed):
    # transforming through b then a equals transforming through compose(a, b)
    rng = np.random.default_rng(seed)
    w = Wrench(rng.uniform(-10, 10, 3), rng.uniform(-1, 1, 3), Frame.SENSOR)
    two_hop = transform_wrench(
        transform_wrench(w, b, from_frame=Frame.SENSOR, to_frame=Frame.TCP),
        a, from_frame=Frame.TCP, to_frame=Frame.BASE)
    one_hop = transform_wrench(w, compose(a, b), from_frame=Frame.SENSOR, to_frame=Frame.BASE)
    np.testing.assert_allclose(two_hop.force, one_hop.force, atol=1e-9)
    np.testing.assert_allclose(two_hop.torque, one_hop.torque, atol=1e-9)


# ---------------------------------------------------------------------------
# timed streams
# ---------------------------------------------------------------------------

def make_stream(n=5, width=2, rate=10.0, t0=0.0):
    ts = t0 + np.arange(n) / rate
    vals = np.arange(n * width, dtype=float).reshape(n, width)
    return TimedStream(ts, vals, rate)


def test_stream_rejects_non_increasing_timestamps():
    with pytest.raises(StreamError):
        TimedStream(np.array([0.0, 0.1, 0.1]), np.zeros((3, 1)), 10.0)
    with pytest.raises(StreamError):
        TimedStream(np.array([0.0, 0.2, 0.1]), np.zeros((3, 1)), 10.0)


def test_stream_rejects_empty():
    with pytest.raises(StreamError):
        TimedStream(np.array([]), np.zeros((0, 1)), 10.0)


def test_stream_rejects_length_mismatch():
    with pytest.raises(StreamError):
        TimedStream(np.array([0.0, 0.1]), np.zeros((3, 1)), 10.0)


def test_resample_linear_midpoints():
    s = make_stream(n=3, width=1)  # values 0, 1, 2 at t = 0, 0.1, 0.2
    out = resample(s, [0.05, 0.15], "linear")
    np.testing.assert_allclose(out[:, 0], [0.5, 1.5], atol=1e-12)


def test_resample_hold_last():
    s = make_stream(n=3, width=1)
    out = resample(s, [0.0, 0.05, 0.1, 0.19], "hold-last")
    np.testing.assert_allclose(out[:, 0], [0.0, 0.0, 1.0, 1.0], atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 40), st.integers(1, 4), st.sampled_from(["linear", "hold-last"]))
def test_resample_at_source_times_is_identity(n, width, policy):
    rng = np.random.default_rng(n * 7 + width)
    ts = np.cumsum(rng.uniform(0.01, 0.2, n))
    vals = rng.standard_normal((n, width))
    s = TimedStream(ts, vals, 10.0)
    np.testing.assert_array_equal(resample(s, ts, policy), vals)


def test_resample_slerp_at_source_times_is_identity():
    rng = np.random.default_rng(3)
    ts = np.arange(4) * 0.1
    vals = np.stack([random_quat(rng) for _ in range(4)])
    s = TimedStream(ts, vals, 10.0)
    np.testing.assert_array_equal(resample(s, ts, "slerp"), vals)


def test_resample_slerp_pose_rows():
    a = Pose([0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]).as_array()
    b = Pose([1.0, 0.0, 0.0], ROT_Z_90).as_array()
    s = TimedStream(np.array([0.0, 1.0]), np.stack([a, b]), 1.0)
    out = resample(s, [0.5], "slerp")[0]
    np.testing.assert_allclose(out[:3], [0.5, 0.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(
        out[3:], [0.9238795325112867, 0.0, 0.0, 0.3826834323650898], atol=1e-12)


def test_resample_clamps_at_edges_by_default():
    s = make_stream(n=3, width=1)
    out = resample(s, [-1.0, 5.0], "linear")
    np.testing.assert_allclose(out[:, 0], [0.0, 2.0], atol=1e-15)


def test_resample_out_of_range_raises_without_clamp():
    s = make_stream(n=3, width=1)
    with pytest.raises(StreamError):
        resample(s, [-1.0], "linear", clamp=False)
    with pytest.raises(StreamError):
        resample(s, [0.5], "linear", clamp=False)


def test_resample_rejects_decreasing_targets():
    s = make_stream()
    with pytest.raises(StreamError):
        resample(s, [0.2, 0.1], "linear")


def test_resample_rejects_unknown_policy():
    with pytest.raises(StreamError):
        resample(make_stream(), [0.1], "cubic")


def test_rotvec_of_axis_angle_round_trips():
    axis = np.array([1.0, 2.0, -2.0]) / 3.0
    rv = quat_to_rotvec(quat_from_axis_angle(axis, 0.7))
    np.testing.assert_allclose(rv, 0.7 * axis, atol=1e-12)


def test_rotvec_is_shortest_arc():
    # 350 degrees about +z comes back as -10 degrees about +z
    rv = quat_to_rotvec(quat_from_axis_angle([0.0, 0.0, 1.0], np.deg2rad(350.0)))
    np.testing.assert_allclose(rv, [0.0, 0.0, -np.deg2rad(10.0)], atol=1e-12)


def test_rotvec_identity_is_zero():
    np.testing.assert_array_equal(quat_to_rotvec(np.array([1.0, 0.0, 0.0, 0.0])), np.zeros(3))
