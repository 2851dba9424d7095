"""State layouts, Rot6D rotation math and the trajectory / clip value types.

Flat ordering of every state vector is ``joints -> root_pos -> root_rot6d``.
Rot6D stores the first two columns of a rotation matrix, column-major.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

ORTHO_TOL = 1e-6
DEGENERATE_TOL = 1e-9


class InvalidRotationError(ValueError):
    pass


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class StateLayout:
    joint_count: int
    has_root_position: bool = True

    def __post_init__(self):
        if int(self.joint_count) < 1:
            raise LayoutError(f"joint_count must be >= 1, got {self.joint_count}")

    @property
    def total_dim(self) -> int:
        return self.joint_count + (3 if self.has_root_position else 0) + 6

    @property
    def joint_slice(self) -> slice:
        return slice(0, self.joint_count)

    @property
    def pos_slice(self) -> Optional[slice]:
        if not self.has_root_position:
            return None
        return slice(self.joint_count, self.joint_count + 3)

    @property
    def rot_slice(self) -> slice:
        start = self.joint_count + (3 if self.has_root_position else 0)
        return slice(start, start + 6)

    def to_dict(self) -> dict:
        return {"joint_count": self.joint_count, "has_root_position": self.has_root_position}

    @classmethod
    def from_dict(cls, d: dict) -> "StateLayout":
        return cls(int(d["joint_count"]), bool(d["has_root_position"]))


# ---------------------------------------------------------------- rotations


def rot6d_from_matrix(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise InvalidRotationError(f"expected 3x3 matrix, got shape {R.shape}")
    norms = np.linalg.norm(R, axis=0)
    if np.any(np.abs(norms - 1.0) > ORTHO_TOL):
        raise InvalidRotationError(f"column norms {norms} deviate from 1")
    if np.abs(R[:, 0] @ R[:, 1]) > ORTHO_TOL or np.linalg.det(R) < 0:
        raise InvalidRotationError("matrix is not a proper rotation")
    return np.concatenate([R[:, 0], R[:, 1]])


def matrix_from_rot6d(v) -> np.ndarray:
    """Gram-Schmidt completion of a 6-vector into a proper rotation matrix."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (6,):
        raise InvalidRotationError(f"expected 6-vector, got shape {v.shape}")
    return matrices_from_rot6d(v[None])[0]


def matrices_from_rot6d(v) -> np.ndarray:
    """Batched Gram-Schmidt, (..., 6) -> (..., 3, 3)."""
    v = np.asarray(v, dtype=np.float64)
    a1, a2 = v[..., :3], v[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 <= DEGENERATE_TOL):
        raise InvalidRotationError("first Rot6D column is (near) zero")
    a = a1 / n1
    b = a2 - np.sum(a * a2, axis=-1, keepdims=True) * a
    n2 = np.linalg.norm(b, axis=-1, keepdims=True)
    if np.any(n2 <= DEGENERATE_TOL):
        raise InvalidRotationError("Rot6D columns are (near) parallel")
    b = b / n2
    c = np.cross(a, b)
    return np.stack([a, b, c], axis=-1)


def orthonormalize_rot6d(v) -> np.ndarray:
    R = matrices_from_rot6d(v)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def axis_angle_matrix(axis, angle) -> np.ndarray:
    """Rodrigues rotation; axis (..., 3) unit, angle (...)."""
    axis = np.asarray(axis, dtype=np.float64)
    angle = np.asarray(angle, dtype=np.float64)
    x, y, z = axis[..., 0], axis[..., 1], axis[..., 2]
    c, s = np.cos(angle), np.sin(angle)
    C = 1.0 - c
    R = np.empty(np.broadcast(x, angle).shape + (3, 3))
    R[..., 0, 0] = c + x * x * C
    R[..., 0, 1] = x * y * C - z * s
    R[..., 0, 2] = x * z * C + y * s
    R[..., 1, 0] = y * x * C + z * s
    R[..., 1, 1] = c + y * y * C
    R[..., 1, 2] = y * z * C - x * s
    R[..., 2, 0] = z * x * C - y * s
    R[..., 2, 1] = z * y * C + x * s
    R[..., 2, 2] = c + z * z * C
    return R


def euler_zyx_matrix(yaw, pitch, roll) -> np.ndarray:
    """R = Rz(yaw) @ Ry(pitch) @ Rx(roll)."""
    yaw, pitch, roll = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (yaw, pitch, roll)))

    def about(axis, angle):
        return axis_angle_matrix(np.broadcast_to(axis, angle.shape + (3,)), angle)

    return about([0.0, 0.0, 1.0], yaw) @ about([0.0, 1.0, 0.0], pitch) @ about([1.0, 0.0, 0.0], roll)


def rotation_angle(R) -> np.ndarray:
    """Geodesic angle of rotation matrices (..., 3, 3)."""
    tr = np.trace(R, axis1=-2, axis2=-1)
    return np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0))


def matrix_log(R) -> np.ndarray:
    """Rotation vector (axis * angle) of a single rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    angle = float(rotation_angle(R))
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if angle < 1e-12:
        return 0.5 * w
    if np.pi - angle < 1e-6:
        # near pi the skew part vanishes; take the axis from the symmetric part
        M = (R + np.eye(3)) / 2.0
        axis = M[:, int(np.argmax(np.diag(M)))]
        axis = axis / np.linalg.norm(axis)
        return axis * angle
    return w * (angle / (2.0 * np.sin(angle)))


# ---------------------------------------------------------------- value types


@dataclass(frozen=True)
class StateVector:
    layout: StateLayout
    joints: np.ndarray
    root_rot6d: np.ndarray
    root_pos: Optional[np.ndarray] = None

    def __post_init__(self):
        joints = np.asarray(self.joints, dtype=np.float64).reshape(-1)
        rot = np.asarray(self.root_rot6d, dtype=np.float64).reshape(-1)
        if joints.shape[0] != self.layout.joint_count:
            raise LayoutError(f"expected {self.layout.joint_count} joints, got {joints.shape[0]}")
        if rot.shape[0] != 6:
            raise LayoutError("root_rot6d must have 6 entries")
        pos = self.root_pos
        if self.layout.has_root_position:
            if pos is None:
                raise LayoutError("layout requires root_pos")
            pos = np.asarray(pos, dtype=np.float64).reshape(-1)
            if pos.shape[0] != 3:
                raise LayoutError("root_pos must have 3 entries")
        elif pos is not None:
            raise LayoutError("layout has no root position but root_pos was given")
        object.__setattr__(self, "joints", joints)
        object.__setattr__(self, "root_rot6d", rot)
        object.__setattr__(self, "root_pos", pos)

    @property
    def rotation(self) -> np.ndarray:
        return matrix_from_rot6d(self.root_rot6d)

    def flatten(self) -> np.ndarray:
        return flatten(self)


def flatten(s: StateVector) -> np.ndarray:
    parts = [s.joints]
    if s.layout.has_root_position:
        parts.append(s.root_pos)
    parts.append(s.root_rot6d)
    return np.concatenate(parts)


def unflatten(x, layout: StateLayout) -> StateVector:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (layout.total_dim,):
        raise LayoutError(f"expected vector of length {layout.total_dim}, got shape {x.shape}")
    pos = x[layout.pos_slice].copy() if layout.has_root_position else None
    return StateVector(layout, x[layout.joint_slice].copy(), x[layout.rot_slice].copy(), pos)


def keyframe_offsets(K: int, H: int) -> np.ndarray:
    """Frame offsets of K keyframes spread over the first H frames of a segment."""
    if K < 2:
        raise ValueError("K must be >= 2")
    k = np.arange(K)
    # round-half-up, so offsets do not depend on banker's rounding
    return np.floor(k * (H - 1) / (K - 1) + 0.5).astype(int)


@dataclass(frozen=True)
class KeyframeTrajectory:
    layout: StateLayout
    horizon_s: float
    frames: np.ndarray  # (K, D) flat states
    times: Optional[np.ndarray] = None  # (K,) seconds; default uniform over [0, horizon_s]

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[1] != self.layout.total_dim:
            raise LayoutError(f"frames must be (K, {self.layout.total_dim}), got {frames.shape}")
        if frames.shape[0] < 2:
            raise ValueError("a keyframe trajectory needs K >= 2")
        if not self.horizon_s > 0:
            raise ValueError("horizon_s must be positive")
        times = self.times
        if times is None:
            times = np.linspace(0.0, self.horizon_s, frames.shape[0])
        times = np.asarray(times, dtype=np.float64)
        if times.shape != (frames.shape[0],) or np.any(np.diff(times) <= 0):
            raise ValueError("keyframe times must be strictly increasing, one per frame")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "times", times)

    @property
    def K(self) -> int:
        return self.frames.shape[0]

    def state(self, k: int) -> StateVector:
        return unflatten(self.frames[k], self.layout)

    def to_dict(self) -> dict:
        return {
            "layout": self.layout.to_dict(),
            "K": self.K,
            "horizon_s": self.horizon_s,
            "times": self.times.tolist(),
            "frames": self.frames.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KeyframeTrajectory":
        return cls(StateLayout.from_dict(d["layout"]), float(d["horizon_s"]),
                   np.asarray(d["frames"], dtype=np.float64), d.get("times"))


@dataclass(frozen=True)
class MotionClip:
    layout: StateLayout
    fps: float
    frames: np.ndarray  # (T, D)
    name: str = "clip"
    category: str = "uncategorized"

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if not self.fps > 0:
            raise ValueError("fps must be positive")
        if frames.ndim != 2 or frames.shape[1] != self.layout.total_dim:
            raise LayoutError(f"frames must be (T, {self.layout.total_dim}), got {frames.shape}")
        if frames.shape[0] < 2:
            raise ValueError("a motion clip needs at least 2 frames")
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return self.frames.shape[0]

    def state(self, i: int) -> StateVector:
        return unflatten(self.frames[i], self.layout)

    def to_dict(self) -> dict:
        return {
            "fps": self.fps,
            "layout": self.layout.to_dict(),
            "name": self.name,
            "category": self.category,
            "frames": self.frames.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MotionClip":
        layout = StateLayout.from_dict(d["layout"])
        frames = np.asarray(d["frames"], dtype=np.float64)
        # noisy reference data: re-orthonormalize rot6d on read
        frames = frames.copy()
        frames[:, layout.rot_slice] = orthonormalize_rot6d(frames[:, layout.rot_slice])
        return cls(layout, float(d["fps"]), frames, str(d.get("name", "clip")),
                   str(d.get("category", "uncategorized")))


@dataclass(frozen=True)
class Observation:
    """Middleware-visible observation: current state, command and optional token."""

    proprio: np.ndarray
    command: np.ndarray
    token: Optional[np.ndarray] = None
    layout: Optional[StateLayout] = field(default=None, compare=False)

    def __post_init__(self):
        p = np.asarray(self.proprio, dtype=np.float64)
        m = np.asarray(self.command, dtype=np.float64)
        if p.shape != m.shape:
            raise LayoutError("proprio and command must share one layout")
        if self.layout is not None and p.shape != (self.layout.total_dim,):
            raise LayoutError("observation does not match its layout")
        object.__setattr__(self, "proprio", p)
        object.__setattr__(self, "command", m)

    @property
    def cond(self) -> np.ndarray:
        return np.concatenate([self.proprio, self.command])


# ---------------------------------------------------------------- clip files


def save_clip(clip: MotionClip, path) -> None:
    Path(path).write_text(json.dumps(clip.to_dict()))


def load_clip(path) -> MotionClip:
    return MotionClip.from_dict(json.loads(Path(path).read_text()))


def load_corpus(directory) -> list[MotionClip]:
    paths = sorted(Path(directory).glob("*.json"))
    return [load_clip(p) for p in paths]


def save_corpus(clips: Sequence[MotionClip], directory) -> list[Path]:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i, clip in enumerate(clips):
        p = out / f"{i:04d}_{clip.name}.json"
        save_clip(clip, p)
        written.append(p)
    return written


def identity_rot6d() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
