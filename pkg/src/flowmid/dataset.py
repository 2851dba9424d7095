"""Training tuples for the trajectory generator.

Each tuple pairs a (noisy) start state and a clean endpoint command with the
residual keyframe motion over the next ``H`` frames and per-dimension
kinematic loss weights.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core_types import (
    KeyframeTrajectory,
    LayoutError,
    MotionClip,
    StateLayout,
    StateVector,
    flatten,
    keyframe_offsets,
)
from .kinematics import (
    DEFAULT_DELTA,
    DEFAULT_W_MIN,
    ChainSpec,
    default_chain,
    jacobian_weights_raw,
    normalize_weights,
)

log = logging.getLogger(__name__)

EPS_STD = 1e-6


class ConfigurationError(ValueError):
    pass


@dataclass
class DatasetConfig:
    K: int = 8
    H: int = 10
    ell_max: int = 20
    stride: Optional[int] = None  # None -> H // 2
    sigma_joint: float = 0.05
    sigma_pos: float = 0.04
    sigma_rot: float = 0.04
    augment: bool = True
    noise_copies: int = 1
    kinematic_weighting: bool = True
    delta: float = DEFAULT_DELTA
    w_min: float = DEFAULT_W_MIN
    eps_std: float = EPS_STD

    @property
    def resolved_stride(self) -> int:
        return self.stride if self.stride else max(1, self.H // 2)

    def sigma_vector(self, layout: StateLayout) -> np.ndarray:
        s = np.empty(layout.total_dim)
        s[layout.joint_slice] = self.sigma_joint
        if layout.has_root_position:
            s[layout.pos_slice] = self.sigma_pos
        s[layout.rot_slice] = self.sigma_rot
        return s


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def normalize(self, r):
        return (np.asarray(r) - self.mean) / self.std

    def denormalize(self, x):
        return np.asarray(x) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d) -> "NormStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def compute_norm_stats(residuals, eps_std: float = EPS_STD) -> NormStats:
    flat = np.asarray(residuals, dtype=np.float64).reshape(-1, residuals.shape[-1])
    return NormStats(flat.mean(axis=0), np.maximum(flat.std(axis=0), eps_std))


@dataclass(frozen=True)
class TrainingTuple:
    cond: np.ndarray             # (2D,) [noisy start, clean command]
    residual_target: np.ndarray  # (K, D)
    weights: np.ndarray          # (K, D)
    clip_id: int
    start_frame: int


# ---------------------------------------------------------------- operations


def sample_segment_length(ell_min: int, ell_max: int, rng: np.random.Generator) -> int:
    """Log-uniform segment length, rounded and clamped to [ell_min, ell_max]."""
    if ell_min > ell_max:
        raise ConfigurationError(f"ell_min={ell_min} exceeds ell_max={ell_max}")
    u = rng.uniform(np.log(ell_min), np.log(ell_max))
    return int(min(max(int(np.rint(np.exp(u))), ell_min), ell_max))


def extract_keyframes(clip: MotionClip, start: int, K: int, H: int) -> KeyframeTrajectory:
    if K < 2:
        raise ValueError("K must be >= 2")
    if start < 0 or start + H > len(clip):
        raise IndexError(f"segment [{start}, {start + H}) exceeds clip of length {len(clip)}")
    offsets = keyframe_offsets(K, H)
    return KeyframeTrajectory(clip.layout, H / clip.fps, clip.frames[start + offsets], offsets / clip.fps)


def residualize(traj: KeyframeTrajectory, anchor) -> np.ndarray:
    """Row k = frame k - anchor; the anchor is the static baseline for every keyframe."""
    if isinstance(anchor, StateVector):
        if anchor.layout != traj.layout:
            raise LayoutError("anchor and trajectory layouts differ")
        anchor = flatten(anchor)
    a = np.asarray(anchor, dtype=np.float64)
    if a.shape != (traj.layout.total_dim,):
        raise LayoutError("anchor does not match the trajectory layout")
    return traj.frames - a


def augment_state(p, sigma, rng: np.random.Generator) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), p.shape)
    if np.any(sigma < 0):
        raise ValueError("noise scales must be nonnegative")
    return p + rng.standard_normal(p.shape) * sigma


# ---------------------------------------------------------------- tuple set


@dataclass
class TupleSet(Sequence):
    """Column storage of training tuples; indexing yields ``TrainingTuple``."""

    layout: StateLayout
    K: int
    horizon_s: float
    cond: np.ndarray      # (N, 2D)
    residual: np.ndarray  # (N, K, D)
    weights: np.ndarray   # (N, K, D)
    clip_id: np.ndarray   # (N,)
    start: np.ndarray     # (N,)
    config: dict = field(default_factory=dict)

    def __len__(self):
        return self.cond.shape[0]

    def __getitem__(self, i):
        return TrainingTuple(self.cond[i], self.residual[i], self.weights[i], int(self.clip_id[i]), int(self.start[i]))

    def save(self, path, norm: NormStats) -> None:
        meta = {"layout": self.layout.to_dict(), "K": self.K, "horizon_s": self.horizon_s,
                "config": self.config, "norm": norm.to_dict()}
        with open(path, "wb") as fh:
            np.savez(fh, cond=self.cond, residual=self.residual, weights=self.weights,
                     clip_id=self.clip_id, start=self.start, meta=np.array(json.dumps(meta, sort_keys=True)))

    @classmethod
    def load(cls, path) -> tuple["TupleSet", NormStats]:
        with np.load(path) as z:
            meta = json.loads(str(z["meta"]))
            ts = cls(StateLayout.from_dict(meta["layout"]), int(meta["K"]), float(meta["horizon_s"]),
                     z["cond"], z["residual"], z["weights"], z["clip_id"], z["start"], meta["config"])
        return ts, NormStats.from_dict(meta["norm"])


def build_dataset(corpus: Sequence[MotionClip], config: DatasetConfig, rng: np.random.Generator,
                  chain: Optional[ChainSpec] = None) -> tuple[TupleSet, NormStats]:
    """Receding-horizon tuples over every clip at a fixed stride.

    The residual target is measured from the noisy start state (the deployed
    baseline), except row 0 which is the zero anchor, so the generator learns
    to lead a perturbed state back onto the motion.
    """
    if not corpus:
        raise ValueError("empty corpus")
    layout = corpus[0].layout
    K, H, S = config.K, config.H, config.resolved_stride
    if H > config.ell_max:
        raise ConfigurationError(f"H={H} exceeds ell_max={config.ell_max}")
    sigma = config.sigma_vector(layout)
    conds, residuals, keyframes, clip_ids, starts = [], [], [], [], []
    for ci, clip in enumerate(corpus):
        if clip.layout != layout:
            raise ValueError(f"clip {clip.name} has a different layout")
        if len(clip) < H:
            log.warning("skipping clip %s: %d frames < horizon %d", clip.name, len(clip), H)
            continue
        for start in range(0, len(clip) - H + 1, S):
            ell = min(sample_segment_length(H, config.ell_max, rng), len(clip) - start)
            traj = extract_keyframes(clip, start, K, H)
            p = clip.frames[start]
            m = clip.frames[start + ell - 1]
            for _ in range(max(1, config.noise_copies)):
                p_noisy = augment_state(p, sigma, rng) if config.augment else p.copy()
                r = residualize(traj, p_noisy)
                r[0] = 0.0
                conds.append(np.concatenate([p_noisy, m]))
                residuals.append(r)
                keyframes.append(traj.frames)
                clip_ids.append(ci)
                starts.append(start)
    if not conds:
        raise ValueError("no clip is long enough for the planning horizon")
    residual = np.stack(residuals)
    kf = np.stack(keyframes)
    if config.kinematic_weighting:
        chain = default_chain() if chain is None else chain
        raw = jacobian_weights_raw(chain, kf.reshape(-1, layout.total_dim), layout, config.delta)
        weights = normalize_weights(raw, config.w_min).reshape(kf.shape)
    else:
        weights = np.ones_like(residual)
    ts = TupleSet(layout, K, H / corpus[0].fps, np.stack(conds), residual, weights,
                  np.asarray(clip_ids), np.asarray(starts), asdict(config))
    return ts, compute_norm_stats(residual, config.eps_std)


def tuple_count(lengths: Sequence[int], H: int, S: int) -> int:
    return sum((n - H) // S + 1 for n in lengths if n >= H)
