"""Inference: warm-started Euler integration of the learned velocity field with
the first keyframe pinned to the current state."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .core_types import KeyframeTrajectory, StateVector, flatten, keyframe_offsets
from .dataset import NormStats


class SamplingError(RuntimeError):
    pass


@dataclass
class SamplerConfig:
    euler_steps: int = 5
    t_start: float = 0.9
    pin_first: bool = True
    warm_start: bool = True  # False: start from pure noise at t = 1
    seed: int = 0

    def __post_init__(self):
        if self.euler_steps < 1:
            raise ValueError("euler_steps must be >= 1")
        if not 0 < self.t_start <= 1:
            raise ValueError("t_start must lie in (0, 1]")


def directional_prior(p, m, K: int) -> np.ndarray:
    """Linear residual ramp from zero to ``m - p``; works on (D,) or batched (N, D)."""
    if K < 2:
        raise ValueError("K must be >= 2")
    p, m = np.asarray(p, dtype=np.float64), np.asarray(m, dtype=np.float64)
    if p.shape != m.shape:
        raise ValueError("p and m must share one layout")
    frac = np.arange(K) / (K - 1)
    return frac[:, None] * (m - p)[..., None, :]


def warm_start_state(r_init, t_start: float, norm: NormStats, rng: np.random.Generator) -> np.ndarray:
    if not 0 < t_start <= 1:
        raise ValueError("t_start must lie in (0, 1]")
    r_init = np.asarray(r_init, dtype=np.float64)
    eps = rng.standard_normal(r_init.shape)
    return (1 - t_start) * norm.normalize(r_init) + t_start * eps


def apply_inpaint_pin(x, t_next: float, r0_normalized, rng: np.random.Generator) -> np.ndarray:
    """Replace keyframe row 0 by the noised zero-residual anchor at flow time ``t_next``."""
    if not 0 <= t_next <= 1:
        raise ValueError("t_next must lie in [0, 1]")
    x = np.array(x, dtype=np.float64, copy=True)
    r0 = np.asarray(r0_normalized, dtype=np.float64)
    eps = rng.standard_normal(x[..., 0, :].shape)
    x[..., 0, :] = (1 - t_next) * r0 + t_next * eps
    return x


def _field(model, x: np.ndarray, t: float, cond: np.ndarray) -> np.ndarray:
    dt = model.dtype
    with torch.no_grad():
        v = model(torch.as_tensor(x, dtype=dt), torch.full((x.shape[0],), t, dtype=dt),
                  torch.as_tensor(cond, dtype=dt))
    return v.double().numpy()


def generate_batch(model, P, M, cfg: SamplerConfig, rng: np.random.Generator,
                   velocity=None) -> np.ndarray:
    """Keyframe trajectories (N, K, D) for states P and commands M, both (N, D).

    ``velocity(x, t, cond)`` overrides the model's field (used for closed-form checks).
    """
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    D = model.layout.total_dim
    if P.shape != M.shape or P.shape[1] != D:
        raise ValueError(f"states and commands must be (N, {D})")
    K, norm = model.K, model.norm
    field = velocity or (lambda x, t, c: _field(model, x, t, c))
    cond = np.concatenate([P, M], axis=1)
    if cfg.warm_start:
        x = warm_start_state(directional_prior(P, M, K), cfg.t_start, norm, rng)
        t0 = cfg.t_start
    else:
        x = rng.standard_normal((P.shape[0], K, D))
        t0 = 1.0
    r0n = norm.normalize(np.zeros(D))
    ts = np.linspace(t0, 0.0, cfg.euler_steps + 1)
    ts[-1] = 0.0
    for t, t_next in zip(ts[:-1], ts[1:]):
        x = x - (t - t_next) * field(x, float(t), cond)
        if cfg.pin_first:
            x = apply_inpaint_pin(x, float(t_next), r0n, rng)
        if not np.all(np.isfinite(x)):
            raise SamplingError(f"non-finite state during integration at t={t_next:.3f}")
    return P[:, None, :] + norm.denormalize(x)


def generate_trajectory(model, p: StateVector, m: StateVector, cfg: SamplerConfig,
                        rng: Optional[np.random.Generator] = None) -> KeyframeTrajectory:
    if p.layout != model.layout or m.layout != model.layout:
        raise ValueError("state/command layout does not match the model")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    frames = generate_batch(model, flatten(p)[None], flatten(m)[None], cfg, rng)[0]
    return KeyframeTrajectory(model.layout, model.horizon_s, frames, keyframe_times(model))


def keyframe_times(model) -> np.ndarray:
    H = getattr(model, "H", None) or int(round(model.horizon_s * 50))
    return keyframe_offsets(model.K, H) * (model.horizon_s / H)
