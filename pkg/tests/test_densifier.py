import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flowmid.core_types import KeyframeTrajectory, StateLayout, axis_angle_matrix, identity_rot6d, keyframe_offsets
from flowmid.densifier import (
    BufferCapacityError,
    DenseReference,
    ReferenceBuffer,
    dense_quaternions,
    densify,
    slerp,
    write_reference_buffer,
)

LAYOUT = StateLayout(3, True)
D = LAYOUT.total_dim
SCALAR = list(range(3)) + list(range(3, 6))
TIMES = keyframe_offsets(8, 10) / 50.0


def traj_from(frames, times=TIMES, horizon=0.2):
    return KeyframeTrajectory(LAYOUT, horizon, frames, times)


def random_keyframes(rng, K=8):
    frames = rng.normal(scale=0.5, size=(K, D))
    for k in range(K):
        axis = rng.normal(size=3)
        R = axis_angle_matrix(axis / np.linalg.norm(axis), rng.uniform(0, np.pi))
        frames[k, LAYOUT.rot_slice] = np.r_[R[:, 0], R[:, 1]]
    return frames


def test_constant_keyframes():
    frames = np.tile(np.r_[0.1, 0.2, 0.3, 1, 2, 3, identity_rot6d()], (8, 1))
    dense = densify(traj_from(frames))
    np.testing.assert_allclose(dense.frames, np.broadcast_to(frames[0], dense.frames.shape), atol=1e-15)


def test_slerp_midpoint_oracle():
    frames = np.tile(np.r_[np.zeros(6), identity_rot6d()], (2, 1))
    frames[1, LAYOUT.rot_slice] = [0, 1, 0, -1, 0, 0]  # 90 degrees about z
    dense = densify(KeyframeTrajectory(LAYOUT, 0.2, frames, np.array([0.0, 0.2])))
    np.testing.assert_allclose(dense_quaternions(dense)[5], [0.9238795325112867, 0, 0, 0.3826834323650898],
                               atol=1e-9)


def test_slerp_takes_shortest_arc():
    q1 = np.array([math.cos(math.pi / 4), 0, 0, math.sin(math.pi / 4)])
    np.testing.assert_allclose(slerp([1.0, 0, 0, 0], -q1, 0.5), slerp([1.0, 0, 0, 0], q1, 0.5), atol=1e-15)


def test_line_is_reproduced():
    a, b = np.array([0.1, -0.3, 0.5, 1.0, 0.0, 0.7]), np.array([2.0, -1.0, 0.5, 0.1, 0.2, -0.4])
    frames = np.tile(np.r_[np.zeros(6), identity_rot6d()], (8, 1))
    frames[:, SCALAR] = a + TIMES[:, None] * b
    dense = densify(traj_from(frames))
    t = np.minimum(np.arange(len(dense)) / 50.0, TIMES[-1])  # held after the last keyframe
    np.testing.assert_allclose(dense.frames[:, SCALAR], a + t[:, None] * b, atol=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_cubics_are_reproduced(seed):
    rng = np.random.default_rng(seed)
    c = rng.normal(size=(4, 6))
    poly = lambda t: c[0] + c[1] * t[:, None] + c[2] * t[:, None] ** 2 + c[3] * t[:, None] ** 3  # noqa: E731
    frames = np.tile(np.r_[np.zeros(6), identity_rot6d()], (8, 1))
    frames[:, SCALAR] = poly(TIMES)
    dense = densify(traj_from(frames))
    np.testing.assert_allclose(dense.frames[:, SCALAR], poly(np.minimum(np.arange(len(dense)) / 50.0, TIMES[-1])),
                               atol=1e-9)


@given(st.integers(0, 2**32 - 1))
def test_interpolation_and_quaternion_invariants(seed):
    rng = np.random.default_rng(seed)
    frames = random_keyframes(rng)
    dense = densify(traj_from(frames))
    assert len(dense) == round(0.2 * 50) + 1
    knots = np.rint(TIMES * 50).astype(int)
    np.testing.assert_allclose(dense.frames[knots][:, SCALAR], frames[:, SCALAR], atol=1e-9)
    np.testing.assert_array_equal(dense.frames[0], frames[0])
    np.testing.assert_array_equal(dense.frames[-1], frames[-1])
    q = dense_quaternions(dense)
    np.testing.assert_allclose(np.linalg.norm(q, axis=1), 1.0, atol=1e-9)
    assert np.all(np.sum(q[1:] * q[:-1], axis=1) >= 0)


def test_joint_channels_are_c1_at_knots(rng):
    fine = 50.0 * 1000
    f = densify(traj_from(random_keyframes(rng)), fine).frames[:, :3]
    h = 1 / fine
    for tk in TIMES[1:-1]:
        i = int(round(tk * fine))
        # four-point one-sided stencils are exact on each cubic piece
        left = (11 * f[i] - 18 * f[i - 1] + 9 * f[i - 2] - 2 * f[i - 3]) / (6 * h)
        right = (-11 * f[i] + 18 * f[i + 1] - 9 * f[i + 2] + 2 * f[i + 3]) / (6 * h)
        np.testing.assert_allclose(left, right, atol=1e-6)


def test_non_finite_keyframes_rejected(rng):
    frames = random_keyframes(rng)
    frames[2, 0] = np.nan
    with pytest.raises(ValueError):
        densify(traj_from(frames))


def test_buffer_write_read_and_supersession():
    buf = ReferenceBuffer(20, 2)
    first = DenseReference(StateLayout(1, False), 50.0, np.arange(20, dtype=float).reshape(10, 2))
    second = DenseReference(StateLayout(1, False), 50.0, -np.ones((6, 2)))
    write_reference_buffer(buf, first, 0)
    for i in range(10):
        np.testing.assert_array_equal(buf.read(i), first.frames[i])
    write_reference_buffer(buf, second, 4)
    np.testing.assert_array_equal(buf.read(3), first.frames[3])
    for i in range(4, 10):
        np.testing.assert_array_equal(buf.read(i), -1.0)


def test_buffer_zero_order_hold_and_capacity():
    buf = ReferenceBuffer(5, 1)
    buf.write(DenseReference(StateLayout(1, False), 50.0, np.arange(5.0)[:, None]), 0)
    assert buf.query(0.0)[0] == 0 and buf.query(0.039)[0] == 1 and buf.query(0.04)[0] == 2
    with pytest.raises(BufferCapacityError):
        buf.write(DenseReference(StateLayout(1, False), 50.0, np.zeros((3, 1))), 3)
    with pytest.raises(BufferCapacityError):
        ReferenceBuffer(3, 1).read(0)
