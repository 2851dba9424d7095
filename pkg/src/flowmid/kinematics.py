"""Forward kinematics of an open revolute chain on a floating base, and the
pose-dependent Jacobian weights used to weight the flow-matching loss."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core_types import (
    LayoutError,
    StateLayout,
    StateVector,
    axis_angle_matrix,
    flatten,
    matrices_from_rot6d,
)

DEFAULT_DELTA = 1e-5
DEFAULT_W_MIN = 0.05


@dataclass(frozen=True)
class Link:
    parent: int  # -1 = floating base
    axis: tuple
    offset: tuple


@dataclass(frozen=True)
class ChainSpec:
    """Link ``i`` rotates by ``q_i`` about ``axis`` at its parent's frame origin,
    then translates by ``offset``; the body position of link ``i`` is the origin
    of the resulting frame."""

    links: tuple
    tracked: tuple

    def __post_init__(self):
        links = tuple(
            l if isinstance(l, Link) else Link(int(l[0]), tuple(map(float, l[1])), tuple(map(float, l[2])))
            for l in self.links
        )
        for i, l in enumerate(links):
            if not -1 <= l.parent < i:
                raise ValueError(f"link {i}: parent {l.parent} must precede it (tree rooted at the base)")
            if abs(np.linalg.norm(l.axis) - 1.0) > 1e-9:
                raise ValueError(f"link {i}: axis {l.axis} is not unit norm")
        tracked = tuple(int(b) for b in self.tracked)
        if not tracked or any(not 0 <= b < len(links) for b in tracked):
            raise ValueError("tracked bodies must be a non-empty subset of link indices")
        object.__setattr__(self, "links", links)
        object.__setattr__(self, "tracked", tracked)

    @property
    def joint_count(self) -> int:
        return len(self.links)

    def to_dict(self) -> dict:
        return {
            "links": [{"parent": l.parent, "axis": list(l.axis), "offset": list(l.offset)} for l in self.links],
            "tracked": list(self.tracked),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChainSpec":
        return cls(tuple(Link(int(l["parent"]), tuple(l["axis"]), tuple(l["offset"])) for l in d["links"]),
                   tuple(d["tracked"]))

    @classmethod
    def load(cls, path) -> "ChainSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_chain() -> ChainSpec:
    """Desk-scale biped-ish chain: leg (hip, knee), waist yaw, arm (shoulder, elbow).

    Tracked bodies are the foot, the chest and the hand. Standing root height is
    0.7 m with the foot at the ground.
    """
    y, z = (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)
    links = (
        Link(-1, y, (0.0, 0.0, -0.35)),   # 0 hip pitch -> knee
        Link(0, y, (0.0, 0.0, -0.35)),    # 1 knee -> foot
        Link(-1, z, (0.0, 0.0, 0.30)),    # 2 waist yaw -> chest
        Link(2, y, (0.0, 0.15, -0.25)),   # 3 shoulder pitch -> elbow
        Link(3, y, (0.0, 0.0, -0.25)),    # 4 elbow -> hand
    )
    return ChainSpec(links, (1, 2, 4))


def planar_arm(l1: float = 1.0, l2: float = 1.0) -> ChainSpec:
    z = (0.0, 0.0, 1.0)
    return ChainSpec((Link(-1, z, (l1, 0.0, 0.0)), Link(0, z, (l2, 0.0, 0.0))), (0, 1))


def chain_height(chain: ChainSpec, layout: StateLayout) -> float:
    """Vertical extent of the tracked bodies plus the base at the zero pose."""
    x = np.zeros(layout.total_dim)
    x[layout.rot_slice] = [1, 0, 0, 0, 1, 0]
    z = forward_kinematics_flat(chain, x[None], layout)[0][:, 2]
    z = np.append(z, 0.0)
    return float(z.max() - z.min())


def _check(chain: ChainSpec, layout: StateLayout):
    if chain.joint_count != layout.joint_count:
        raise LayoutError(f"chain has {chain.joint_count} joints, layout has {layout.joint_count}")


def link_frames(chain: ChainSpec, X, layout: StateLayout):
    """Rotations (N, J, 3, 3) and origins (N, J, 3) of every link for flat states X (N, D)."""
    _check(chain, layout)
    X = np.asarray(X, dtype=np.float64)
    N = X.shape[0]
    R_base = matrices_from_rot6d(X[:, layout.rot_slice])
    p_base = X[:, layout.pos_slice] if layout.has_root_position else np.zeros((N, 3))
    q = X[:, layout.joint_slice]
    J = chain.joint_count
    Rs = np.empty((N, J, 3, 3))
    ps = np.empty((N, J, 3))
    for i, link in enumerate(chain.links):
        if link.parent < 0:
            Rp, pp = R_base, p_base
        else:
            Rp, pp = Rs[:, link.parent], ps[:, link.parent]
        Ri = Rp @ axis_angle_matrix(np.broadcast_to(link.axis, (N, 3)), q[:, i])
        Rs[:, i] = Ri
        ps[:, i] = pp + Ri @ np.asarray(link.offset)
    return Rs, ps


def forward_kinematics_flat(chain: ChainSpec, X, layout: StateLayout) -> np.ndarray:
    """Tracked body positions (N, B, 3) for flat states (N, D)."""
    _, ps = link_frames(chain, X, layout)
    return ps[:, list(chain.tracked)]


def forward_kinematics(chain: ChainSpec, s: StateVector) -> list[np.ndarray]:
    pos = forward_kinematics_flat(chain, flatten(s)[None], s.layout)[0]
    return [p for p in pos]


def jacobian_weights_raw(chain: ChainSpec, X, layout: StateLayout, delta: float = DEFAULT_DELTA) -> np.ndarray:
    """Central-difference sum over tracked bodies of |dp_b/dx_d|^2, shape (N, D).

    Joint and Rot6D dimensions are perturbed by +-delta (Rot6D is re-orthonormalized
    inside FK); root-position dimensions get the analytic value, the number of
    tracked bodies.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    N, D = X.shape
    W = np.zeros((N, D))
    dims = list(range(layout.joint_count)) + list(range(D)[layout.rot_slice])
    for d in dims:
        Xp, Xm = X.copy(), X.copy()
        Xp[:, d] += delta
        Xm[:, d] -= delta
        diff = (forward_kinematics_flat(chain, Xp, layout) - forward_kinematics_flat(chain, Xm, layout)) / (2 * delta)
        W[:, d] = np.sum(diff ** 2, axis=(1, 2))
    if layout.has_root_position:
        W[:, layout.pos_slice] = float(len(chain.tracked))
    return W


def normalize_weights(W, w_min: float = DEFAULT_W_MIN) -> np.ndarray:
    """Scale every dimension to unit mean over all leading axes, then clamp below."""
    W = np.asarray(W, dtype=np.float64)
    flat = W.reshape(-1, W.shape[-1])
    mean = flat.mean(axis=0)
    scale = np.divide(1.0, mean, out=np.zeros_like(mean), where=mean > 0)
    return np.maximum(W * scale, w_min)


def kinematic_weights(chain: ChainSpec, X, layout: StateLayout, delta: float = DEFAULT_DELTA,
                      w_min: float = DEFAULT_W_MIN) -> np.ndarray:
    """Normalized, clamped per-dimension weights for a batch of flat states (..., D)."""
    X = np.asarray(X, dtype=np.float64)
    raw = jacobian_weights_raw(chain, X.reshape(-1, X.shape[-1]), layout, delta)
    return normalize_weights(raw, w_min).reshape(X.shape)


def state_weights(chain: ChainSpec, s: StateVector, delta: float = DEFAULT_DELTA) -> np.ndarray:
    """Un-normalized weights of a single state."""
    return jacobian_weights_raw(chain, flatten(s)[None], s.layout, delta)[0]
