"""Keyframes -> dense reference at the tracker rate.

Joint and root-position channels use a not-a-knot cubic spline, which is exact
on polynomials up to degree three; root orientation uses piecewise slerp between
consecutive keyframes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.spatial.transform import Rotation

from .core_types import KeyframeTrajectory, StateLayout, matrices_from_rot6d

DEFAULT_FPS = 50.0


@dataclass(frozen=True)
class DenseReference:
    layout: StateLayout
    fps: float
    frames: np.ndarray  # (n, D)

    def __len__(self):
        return self.frames.shape[0]


# quaternions are (w, x, y, z)

def quat_from_matrix(R) -> np.ndarray:
    xyzw = Rotation.from_matrix(np.asarray(R)).as_quat()
    return np.roll(xyzw, 1, axis=-1)


def matrix_from_quat(q) -> np.ndarray:
    return Rotation.from_quat(np.roll(np.asarray(q), -1, axis=-1)).as_matrix()


def slerp(q0, q1, u) -> np.ndarray:
    """Shortest-arc spherical interpolation; ``u`` may be an array of fractions."""
    q0 = np.asarray(q0, dtype=np.float64)
    q1 = np.asarray(q1, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)[..., None]
    dot = float(q0 @ q1)
    if dot < 0:
        q1, dot = -q1, -dot
    if dot > 1 - 1e-12:
        out = q0 + u * (q1 - q0)
        return out / np.linalg.norm(out, axis=-1, keepdims=True)
    theta = np.arccos(min(dot, 1.0))
    s = np.sin(theta)
    return (np.sin((1 - u) * theta) * q0 + np.sin(u * theta) * q1) / s


def hemisphere_align(quats) -> np.ndarray:
    """Flip signs so consecutive quaternions have nonnegative dot products."""
    q = np.array(quats, dtype=np.float64, copy=True)
    for i in range(1, len(q)):
        if q[i] @ q[i - 1] < 0:
            q[i] = -q[i]
    return q


def densify(traj: KeyframeTrajectory, fps: float = DEFAULT_FPS) -> DenseReference:
    frames = traj.frames
    if not np.all(np.isfinite(frames)):
        raise ValueError("non-finite keyframes")
    layout = traj.layout
    n = int(round(traj.horizon_s * fps)) + 1
    t = np.minimum(np.arange(n) / fps, traj.times[-1])  # hold the last keyframe past its time
    out = np.empty((n, layout.total_dim))

    scalar = np.r_[np.arange(layout.joint_count),
                   np.arange(layout.total_dim)[layout.pos_slice] if layout.has_root_position else []].astype(int)
    spline = CubicSpline(traj.times, frames[:, scalar], bc_type="not-a-knot", axis=0)
    out[:, scalar] = spline(t)

    quats = hemisphere_align(quat_from_matrix(matrices_from_rot6d(frames[:, layout.rot_slice])))
    seg = np.clip(np.searchsorted(traj.times, t, side="right") - 1, 0, len(traj.times) - 2)
    dense_q = np.empty((n, 4))
    for i in range(n):
        k = seg[i]
        u = (t[i] - traj.times[k]) / (traj.times[k + 1] - traj.times[k])
        dense_q[i] = slerp(quats[k], quats[k + 1], u)
    dense_q = hemisphere_align(dense_q)
    R = matrix_from_quat(dense_q)
    out[:, layout.rot_slice] = np.concatenate([R[:, :, 0], R[:, :, 1]], axis=-1)
    # endpoints reproduce the keyframes bit-exactly
    out[0] = frames[0]
    if t[-1] == traj.times[-1]:
        out[-1] = frames[-1]
    return DenseReference(layout, fps, out)


def dense_quaternions(dense: DenseReference) -> np.ndarray:
    return hemisphere_align(quat_from_matrix(matrices_from_rot6d(dense.frames[:, dense.layout.rot_slice])))


class BufferCapacityError(IndexError):
    pass


class ReferenceBuffer:
    """Fixed-capacity frame buffer; later writes supersede earlier ones."""

    def __init__(self, capacity: int, dim: int, fps: float = DEFAULT_FPS):
        self.fps = fps
        self.frames = np.full((capacity, dim), np.nan)
        self.written = np.zeros(capacity, dtype=bool)

    @property
    def capacity(self) -> int:
        return self.frames.shape[0]

    def write(self, dense: DenseReference, offset: int) -> None:
        n = len(dense)
        if offset < 0 or offset + n > self.capacity:
            raise BufferCapacityError(f"write of {n} frames at {offset} exceeds capacity {self.capacity}")
        self.frames[offset:offset + n] = dense.frames
        self.written[offset:offset + n] = True

    def read(self, i: int) -> np.ndarray:
        if not self.written[i]:
            raise BufferCapacityError(f"frame {i} has never been written")
        return self.frames[i].copy()

    def query(self, t: float) -> np.ndarray:
        """Zero-order hold: the frame at or before time ``t``."""
        return self.read(int(np.floor(t * self.fps + 1e-9)))


def write_reference_buffer(buffer: ReferenceBuffer, dense: DenseReference, offset: int) -> None:
    buffer.write(dense, offset)
