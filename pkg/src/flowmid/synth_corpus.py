"""Deterministic synthetic motion corpora built from banded sinusoids."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core_types import MotionClip, StateLayout, euler_zyx_matrix


@dataclass(frozen=True)
class Family:
    category: str
    count: int
    freq_band: tuple = (0.2, 0.6)       # Hz
    amp_band: tuple = (0.1, 0.5)        # rad, joints
    root_amp_band: tuple = (0.02, 0.06)  # m, root xyz sway
    rot_amp_band: tuple = (0.05, 0.2)   # rad, roll/pitch/yaw
    duration_s: float = 6.0
    fps: float = 50.0
    base_height: float = 0.7

    def __post_init__(self):
        for name in ("freq_band", "amp_band", "root_amp_band", "rot_amp_band"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{self.category}: bad {name} {(lo, hi)}")
        if self.freq_band[0] <= 0:
            raise ValueError("frequency band must be positive")
        if self.fps <= 0 or self.duration_s <= 0 or self.count < 0:
            raise ValueError("fps, duration and count must be positive")


@dataclass(frozen=True)
class CorpusSpec:
    families: tuple
    joint_count: int = 5
    has_root_position: bool = True
    seed: int = 0

    @property
    def layout(self) -> StateLayout:
        return StateLayout(self.joint_count, self.has_root_position)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        fams = tuple(Family(**{k: tuple(v) if isinstance(v, list) else v for k, v in f.items()})
                     for f in d["families"])
        return cls(fams, int(d.get("joint_count", 5)), bool(d.get("has_root_position", True)),
                   int(d.get("seed", 0)))

    @classmethod
    def load(cls, path) -> "CorpusSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_spec(seed: int = 0, scale: int = 1) -> CorpusSpec:
    return CorpusSpec(
        families=(
            Family("locomotion", 8 * scale, (0.2, 0.5), (0.1, 0.4), (0.02, 0.06), (0.05, 0.15)),
            Family("dance", 8 * scale, (0.3, 0.7), (0.15, 0.45), (0.02, 0.05), (0.05, 0.25)),
            Family("fall_recovery", 8 * scale, (0.1, 0.2), (0.3, 0.8), (0.1, 0.2), (0.4, 1.0),
                   duration_s=8.0, base_height=0.45),
        ),
        seed=seed,
    )


def _banded_signal(rng: np.random.Generator, t: np.ndarray, freq_band, amp_band) -> np.ndarray:
    n = int(rng.integers(1, 4))
    out = np.zeros_like(t)
    for _ in range(n):
        f = rng.uniform(*freq_band)
        a = rng.uniform(*amp_band) / n
        phase = rng.uniform(0.0, 2 * np.pi)
        out += a * np.sin(2 * np.pi * f * t + phase)
    return out


def generate_clip(family: Family, layout: StateLayout, rng: np.random.Generator, name: str) -> MotionClip:
    T = int(round(family.duration_s * family.fps))
    t = np.arange(T) / family.fps
    cols = [_banded_signal(rng, t, family.freq_band, family.amp_band) for _ in range(layout.joint_count)]
    if layout.has_root_position:
        for axis in range(3):
            sig = _banded_signal(rng, t, family.freq_band, family.root_amp_band)
            cols.append(sig + (family.base_height if axis == 2 else 0.0))
    roll, pitch, yaw = (_banded_signal(rng, t, family.freq_band, family.rot_amp_band) for _ in range(3))
    R = euler_zyx_matrix(yaw, pitch, roll)
    frames = np.column_stack(cols + [R[:, :, 0], R[:, :, 1]])
    return MotionClip(layout, family.fps, frames, name, family.category)


def generate_corpus(spec: CorpusSpec, rng: np.random.Generator | None = None) -> list[MotionClip]:
    """Clips in family order; every clip draws from its own child stream so a family's
    clips do not depend on the counts of earlier families."""
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    layout = spec.layout
    clips = []
    for fi, fam in enumerate(spec.families):
        fam_seq = np.random.SeedSequence(int(rng.integers(2**63 - 1)), spawn_key=(fi,))
        for ci, child in enumerate(fam_seq.spawn(fam.count)):
            clips.append(generate_clip(fam, layout, np.random.default_rng(child), f"{fam.category}_{ci:03d}"))
    return clips
