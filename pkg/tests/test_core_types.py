import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from flowmid.core_types import (
    InvalidRotationError,
    KeyframeTrajectory,
    LayoutError,
    MotionClip,
    Observation,
    StateLayout,
    StateVector,
    axis_angle_matrix,
    flatten,
    identity_rot6d,
    keyframe_offsets,
    load_clip,
    matrix_from_rot6d,
    orthonormalize_rot6d,
    rot6d_from_matrix,
    save_clip,
    unflatten,
)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def well_conditioned(v):
    a, b = v[:3], v[3:]
    if np.linalg.norm(a) < 1e-3:
        return False
    return np.linalg.norm(b - (a @ b) / (a @ a) * a) > 1e-3


rot6d_vectors = arrays(np.float64, 6, elements=finite).filter(well_conditioned)


@pytest.mark.parametrize("layout, dim", [((29, True), 38), ((29, False), 35), ((5, True), 14), ((5, False), 11)])
def test_total_dim(layout, dim):
    assert StateLayout(*layout).total_dim == dim


def test_layout_rejects_zero_joints():
    with pytest.raises(LayoutError):
        StateLayout(0)


def test_rot6d_of_identity():
    np.testing.assert_array_equal(rot6d_from_matrix(np.eye(3)), [1, 0, 0, 0, 1, 0])


def test_rot6d_of_quarter_turn_about_z():
    R = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    np.testing.assert_allclose(rot6d_from_matrix(R), [0, 1, 0, -1, 0, 0], atol=1e-15)


def test_rot6d_rejects_non_orthonormal():
    with pytest.raises(InvalidRotationError):
        rot6d_from_matrix(np.diag([1.0, 2.0, 1.0]))


def test_rot6d_rejects_reflection():
    with pytest.raises(InvalidRotationError):
        rot6d_from_matrix(np.diag([1.0, 1.0, -1.0]))


@pytest.mark.parametrize("v", [(1, 0, 0, 0, 1, 0), (2, 0, 0, 0, 3, 0), (1, 0, 0, 1, 1, 0)])
def test_gram_schmidt_examples_give_identity(v):
    np.testing.assert_allclose(matrix_from_rot6d(v), np.eye(3), atol=1e-15)


@pytest.mark.parametrize("v", [(0, 0, 0, 0, 1, 0), (1, 0, 0, 2, 0, 0)])
def test_degenerate_rot6d_raises(v):
    with pytest.raises(InvalidRotationError):
        matrix_from_rot6d(v)


@given(rot6d_vectors)
def test_gram_schmidt_gives_proper_rotation(v):
    R = matrix_from_rot6d(v)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)
    assert abs(np.linalg.det(R) - 1.0) < 1e-9


@given(rot6d_vectors)
def test_rot6d_round_trip_is_orthonormalization(v):
    out = rot6d_from_matrix(matrix_from_rot6d(v))
    np.testing.assert_allclose(out, orthonormalize_rot6d(v), atol=1e-12)
    # idempotent on its image
    np.testing.assert_allclose(rot6d_from_matrix(matrix_from_rot6d(out)), out, atol=1e-12)


def test_flatten_ordering_with_root_position():
    s = StateVector(StateLayout(2, True), [0.1, 0.2], identity_rot6d(), [1, 2, 3])
    np.testing.assert_array_equal(flatten(s), [0.1, 0.2, 1, 2, 3, 1, 0, 0, 0, 1, 0])


def test_flatten_without_root_position():
    s = StateVector(StateLayout(2, False), [0.1, 0.2], identity_rot6d())
    np.testing.assert_array_equal(flatten(s), [0.1, 0.2, 1, 0, 0, 0, 1, 0])


def test_root_position_presence_must_match_layout():
    with pytest.raises(LayoutError):
        StateVector(StateLayout(2, True), [0.1, 0.2], identity_rot6d())
    with pytest.raises(LayoutError):
        StateVector(StateLayout(2, False), [0.1, 0.2], identity_rot6d(), [0, 0, 0])


def test_unflatten_dimension_mismatch():
    with pytest.raises(LayoutError):
        unflatten(np.zeros(7), StateLayout(2, False))


@given(st.integers(1, 8), st.booleans(), st.data())
def test_flatten_unflatten_round_trip(j, has_pos, data):
    layout = StateLayout(j, has_pos)
    x = data.draw(arrays(np.float64, layout.total_dim, elements=finite))
    np.testing.assert_array_equal(flatten(unflatten(x, layout)), x)
    s = unflatten(x, layout)
    s2 = unflatten(flatten(s), layout)
    np.testing.assert_array_equal(s2.joints, s.joints)
    np.testing.assert_array_equal(s2.root_rot6d, s.root_rot6d)


def test_keyframe_offsets_default_profile():
    np.testing.assert_array_equal(keyframe_offsets(8, 10), [0, 1, 3, 4, 5, 6, 8, 9])
    np.testing.assert_array_equal(keyframe_offsets(2, 2), [0, 1])


def test_keyframe_trajectory_invariants():
    layout = StateLayout(1, False)
    with pytest.raises(ValueError):
        KeyframeTrajectory(layout, 0.2, np.zeros((1, layout.total_dim)))
    with pytest.raises(ValueError):
        KeyframeTrajectory(layout, 0.0, np.zeros((2, layout.total_dim)))
    traj = KeyframeTrajectory(layout, 0.2, np.zeros((3, layout.total_dim)))
    np.testing.assert_allclose(traj.times, [0, 0.1, 0.2])
    assert KeyframeTrajectory.from_dict(json.loads(json.dumps(traj.to_dict()))).K == 3


def test_clip_invariants():
    layout = StateLayout(1, False)
    with pytest.raises(ValueError):
        MotionClip(layout, 0.0, np.zeros((3, layout.total_dim)))
    with pytest.raises(ValueError):
        MotionClip(layout, 50.0, np.zeros((1, layout.total_dim)))


def test_clip_file_round_trip_reorthonormalizes(tmp_path):
    layout = StateLayout(2, True)
    frames = np.zeros((3, layout.total_dim))
    frames[:, layout.rot_slice] = identity_rot6d()
    frames[1, layout.rot_slice] = [2, 0, 0, 0.1, 3, 0]  # noisy rotation
    clip = MotionClip(layout, 50.0, frames, "walk", "locomotion")
    path = tmp_path / "clip.json"
    save_clip(clip, path)
    doc = json.loads(path.read_text())
    assert set(doc) == {"fps", "layout", "name", "category", "frames"}
    back = load_clip(path)
    assert (back.name, back.category, back.fps) == ("walk", "locomotion", 50.0)
    np.testing.assert_allclose(back.frames[1, layout.rot_slice], [1, 0, 0, 0, 1, 0], atol=1e-15)
    np.testing.assert_array_equal(back.frames[0], frames[0])


def test_observation_layout_contract():
    obs = Observation(np.zeros(8), np.ones(8), layout=StateLayout(2, False))
    assert obs.cond.shape == (16,)
    with pytest.raises(LayoutError):
        Observation(np.zeros(8), np.ones(7))


def test_axis_angle_matches_quarter_turn():
    np.testing.assert_allclose(axis_angle_matrix([0, 0, 1], np.pi / 2),
                               [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-15)
