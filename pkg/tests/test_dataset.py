import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flowmid.core_types import LayoutError, MotionClip, StateLayout, identity_rot6d, keyframe_offsets, unflatten
from flowmid.dataset import (
    EPS_STD,
    ConfigurationError,
    DatasetConfig,
    TupleSet,
    augment_state,
    build_dataset,
    extract_keyframes,
    residualize,
    sample_segment_length,
    tuple_count,
)
from flowmid.synth_corpus import default_spec, generate_corpus

LAYOUT = StateLayout(5, True)


def ramp_clip(n=40, name="ramp"):
    frames = np.zeros((n, LAYOUT.total_dim))
    frames[:, :5] = np.linspace(0, 1, n)[:, None] * np.arange(1, 6)
    frames[:, LAYOUT.rot_slice] = identity_rot6d()
    return MotionClip(LAYOUT, 50.0, frames, name)


def constant_clip(n=30):
    frames = np.zeros((n, LAYOUT.total_dim))
    frames[:, LAYOUT.rot_slice] = identity_rot6d()
    frames[:, :5] = 0.3
    return MotionClip(LAYOUT, 50.0, frames, "still")


def test_degenerate_segment_interval(rng):
    assert {sample_segment_length(10, 10, rng) for _ in range(100)} == {10}


def test_segment_length_median_and_support(rng):
    draws = np.array([sample_segment_length(10, 100, rng) for _ in range(10 ** 5)])
    assert draws.min() >= 10 and draws.max() <= 100
    assert abs(np.median(draws) - np.sqrt(1000)) <= 0.05 * np.sqrt(1000)


def test_segment_interval_validation(rng):
    with pytest.raises(ConfigurationError):
        sample_segment_length(20, 10, rng)


def test_extract_keyframes_offsets():
    clip = ramp_clip()
    traj = extract_keyframes(clip, 5, 8, 10)
    np.testing.assert_array_equal(traj.frames, clip.frames[5 + np.array([0, 1, 3, 4, 5, 6, 8, 9])])
    assert traj.horizon_s == pytest.approx(0.2)
    with pytest.raises(IndexError):
        extract_keyframes(clip, 35, 8, 10)


def test_constant_clip_gives_identical_keyframes():
    traj = extract_keyframes(constant_clip(), 0, 8, 10)
    assert np.all(traj.frames == traj.frames[0])


def test_residualize_examples():
    clip = ramp_clip()
    traj = extract_keyframes(clip, 3, 8, 10)
    r = residualize(traj, traj.state(0))
    np.testing.assert_array_equal(r[0], 0.0)
    # (f - a) + a can differ from f by one rounding step
    np.testing.assert_allclose(traj.frames[0] + r, traj.frames, rtol=0, atol=4 * np.finfo(float).eps * 5)
    shifted = traj.frames[0].copy()
    shifted[2] += 0.25
    np.testing.assert_allclose(residualize(traj, shifted)[:, 2], r[:, 2] - 0.25, atol=1e-15)
    with pytest.raises(LayoutError):
        residualize(traj, unflatten(np.r_[np.zeros(2), identity_rot6d()], StateLayout(2, False)))


def test_augment_zero_noise_is_identity(rng):
    p = np.arange(LAYOUT.total_dim, dtype=float)
    np.testing.assert_array_equal(augment_state(p, 0.0, rng), p)


def test_augment_noise_scale(rng):
    sigma = np.array([0.02, 0.01, 0.5])
    draws = np.stack([augment_state(np.zeros(3), sigma, rng) for _ in range(10 ** 5)])
    np.testing.assert_allclose(draws.std(axis=0), sigma, rtol=0.03)


def test_augment_rejects_negative_scale(rng):
    with pytest.raises(ValueError):
        augment_state(np.zeros(2), [-1.0, 0.0], rng)


def test_constant_corpus_has_zero_targets(rng):
    data, norm = build_dataset([constant_clip()], DatasetConfig(augment=False), rng)
    np.testing.assert_array_equal(data.residual, 0.0)
    np.testing.assert_array_equal(norm.mean, 0.0)
    np.testing.assert_array_equal(norm.std, EPS_STD)


@given(st.lists(st.integers(5, 60), min_size=1, max_size=5), st.integers(1, 7))
def test_tuple_count_formula(lengths, stride):
    H = 10
    clips = [ramp_clip(max(n, 2), f"c{i}") for i, n in enumerate(lengths)]
    if all(len(c) < H for c in clips):
        return
    data, _ = build_dataset(clips, DatasetConfig(stride=stride), np.random.default_rng(0))
    expected = sum((len(c) - H) // stride + 1 for c in clips if len(c) >= H)
    assert len(data) == expected == tuple_count([len(c) for c in clips], H, stride)


def test_tuple_structure(rng):
    clip = ramp_clip(60)
    cfg = DatasetConfig()
    data, norm = build_dataset([clip], cfg, rng)
    D = LAYOUT.total_dim
    offsets = keyframe_offsets(cfg.K, cfg.H)
    for tup in data:
        np.testing.assert_array_equal(tup.residual_target[0], 0.0)
        p_noisy, m = tup.cond[:D], tup.cond[D:]
        # command is a clean clip frame at least H - 1 frames ahead
        idx = np.flatnonzero(np.all(clip.frames == m, axis=1))
        assert idx.size and idx[0] >= tup.start_frame + cfg.H - 1
        assert idx[0] <= tup.start_frame + cfg.ell_max - 1
        # targets lead from the noisy start onto the true keyframes
        np.testing.assert_allclose(p_noisy + tup.residual_target[1:], clip.frames[tup.start_frame + offsets[1:]],
                                   atol=1e-12)
        assert np.all(tup.weights >= cfg.w_min)


def test_clean_start_without_augmentation(rng):
    clip = ramp_clip(60)
    data, _ = build_dataset([clip], DatasetConfig(augment=False), rng)
    D = LAYOUT.total_dim
    for tup in data:
        np.testing.assert_array_equal(tup.cond[:D], clip.frames[tup.start_frame])


def test_normalized_residuals_are_standardized():
    corpus = generate_corpus(default_spec(0))[:6]
    data, norm = build_dataset(corpus, DatasetConfig(), np.random.default_rng(0))
    x = norm.normalize(data.residual).reshape(-1, LAYOUT.total_dim)
    assert np.max(np.abs(x.mean(axis=0))) < 1e-9
    np.testing.assert_allclose(x.std(axis=0), 1.0, atol=1e-9)


def test_build_is_deterministic():
    corpus = [ramp_clip(50)]
    a, _ = build_dataset(corpus, DatasetConfig(), np.random.default_rng(3))
    b, _ = build_dataset(corpus, DatasetConfig(), np.random.default_rng(3))
    np.testing.assert_array_equal(a.cond, b.cond)
    np.testing.assert_array_equal(a.residual, b.residual)


def test_empty_corpus_and_short_clips(rng, caplog):
    with pytest.raises(ValueError):
        build_dataset([], DatasetConfig(), rng)
    with caplog.at_level(logging.WARNING):
        data, _ = build_dataset([ramp_clip(5, "short"), ramp_clip(30)], DatasetConfig(), rng)
    assert "short" in caplog.text
    assert set(data.clip_id) == {1}


def test_horizon_longer_than_segment_cap(rng):
    with pytest.raises(ConfigurationError):
        build_dataset([ramp_clip()], DatasetConfig(H=30, ell_max=20), rng)


def test_dataset_file_round_trip(tmp_path, rng):
    data, norm = build_dataset([ramp_clip(40)], DatasetConfig(), rng)
    path = tmp_path / "data.npz"
    data.save(path, norm)
    back, norm2 = TupleSet.load(path)
    np.testing.assert_array_equal(back.residual, data.residual)
    np.testing.assert_array_equal(norm2.std, norm.std)
    assert back.K == data.K and back.config["ell_max"] == data.config["ell_max"]
