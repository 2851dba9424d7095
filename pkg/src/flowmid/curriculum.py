"""Adaptive temporal-bin sampling.

Per-bin difficulty is an exponential moving average of ``1 - mean score``;
sampling mixes a capped, kernel-smoothed difficulty distribution with a
uniform floor.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


@dataclass
class BinState:
    B: int = 64
    alpha: float = 0.1
    eta: float = 0.8
    cap: float = 3.0
    kernel_decay: float = 1.0   # lambda in exp(-|j| / lambda)
    kernel_radius: int = 3
    warmup_episodes: int = 0
    F: Optional[np.ndarray] = None
    episodes: int = 0

    def __post_init__(self):
        if self.B < 1:
            raise ValueError("B must be >= 1")
        if not (0 <= self.alpha <= 1 and 0 <= self.eta <= 1):
            raise ValueError("alpha and eta must lie in [0, 1]")
        if self.cap <= 0 or self.kernel_decay <= 0 or self.kernel_radius < 0:
            raise ValueError("cap, kernel_decay must be positive and kernel_radius nonnegative")
        self.F = np.zeros(self.B) if self.F is None else np.asarray(self.F, dtype=np.float64).copy()
        if self.F.shape != (self.B,) or np.any(self.F < 0):
            raise ValueError(f"F must be a nonnegative vector of length {self.B}")

    def kernel(self) -> np.ndarray:
        j = np.arange(-self.kernel_radius, self.kernel_radius + 1)
        w = np.exp(-np.abs(j) / self.kernel_decay)
        return w / w.sum()


def update_bin(state: BinState, b: int, scores: Sequence[float]) -> float:
    """Fold one episode into bin ``b``; returns the episode difficulty ``d``."""
    if not 0 <= b < state.B:
        raise IndexError(f"bin {b} out of range for B={state.B}")
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("empty score list")
    if np.any((s < 0) | (s > 1)):
        raise ValueError("scores must lie in [0, 1]")
    d = 1.0 - float(s.mean())
    state.F[b] = state.alpha * d + (1 - state.alpha) * state.F[b]
    state.episodes += 1
    return d


def capped_difficulties(state: BinState) -> np.ndarray:
    return np.minimum(state.F, state.cap * state.F.mean())


def smooth_difficulties(state: BinState) -> np.ndarray:
    """Cap at ``cap * mean(F)`` then convolve with the kernel, mirroring at the ends."""
    F_hat = capped_difficulties(state)
    r = state.kernel_radius
    if r == 0:
        return F_hat
    # half-sample symmetric padding keeps the total mass when the kernel is symmetric
    return np.convolve(np.pad(F_hat, r, mode="symmetric"), state.kernel(), mode="valid")


def sampling_distribution(state: BinState) -> np.ndarray:
    B = state.B
    uniform = np.full(B, 1.0 / B)
    if state.episodes < state.warmup_episodes:
        return uniform
    F_tilde = smooth_difficulties(state)
    total = F_tilde.sum()
    if total <= 0:
        return uniform
    return state.eta * F_tilde / total + (1 - state.eta) / B


def sample_bin(state: BinState, rng: np.random.Generator) -> int:
    P = sampling_distribution(state)
    return int(rng.choice(state.B, p=P))


def bin_of_frame(frame: int, total_frames: int, B: int) -> int:
    """Temporal bin of a frame index in the concatenated corpus."""
    if not 0 <= frame < total_frames:
        raise IndexError("frame outside the corpus")
    return min(B - 1, frame * B // total_frames)


def dump_csv(state: BinState, path) -> Path:
    path = Path(path)
    F_tilde, P = smooth_difficulties(state), sampling_distribution(state)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin", "F", "F_smoothed", "P"])
        for b in range(state.B):
            w.writerow([b, f"{state.F[b]:.10g}", f"{F_tilde[b]:.10g}", f"{P[b]:.10g}"])
    return path
