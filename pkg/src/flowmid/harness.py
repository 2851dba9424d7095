"""Closed-loop receding-horizon evaluation with a kinematic surrogate tracker.

The loop runs at the clip frame rate.  Every ``n_exec`` control steps the
generator plans a keyframe trajectory from the current state toward the
current reference frame; the plan is densified into a reference buffer that
the tracker pursues.  Disturbances are instantaneous state kicks.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .core_types import (
    KeyframeTrajectory,
    MotionClip,
    StateLayout,
    StateVector,
    axis_angle_matrix,
    flatten,
    keyframe_offsets,
    matrices_from_rot6d,
    matrix_log,
    rotation_angle,
    unflatten,
)
from .densifier import ReferenceBuffer, densify
from .sampler import SamplerConfig, directional_prior, generate_batch, keyframe_times

log = logging.getLogger(__name__)

REF_HEIGHT_THRESHOLD = 0.3   # m, for a 1.32 m robot
REF_ORI_THRESHOLD = 1.2      # rad
REF_ROBOT_HEIGHT = 1.32      # m
# push table: linear velocity xy / z (m/s), angular velocity roll-pitch / yaw (rad/s)
PUSH_LIN_XY, PUSH_LIN_Z = 0.5, 0.2
PUSH_ANG_RP, PUSH_ANG_Y = 0.52, 0.78
PUSH_INTERVAL_S = (1.0, 3.0)


@dataclass
class SurrogateTracker:
    max_joint_rate: float = 4.0     # rad/s
    max_root_lin_rate: float = 1.5  # m/s
    max_root_ang_rate: float = 4.0  # rad/s
    tracking_gain: float = 50.0     # 1/s; gain*dt = 1 at 50 Hz

    def __post_init__(self):
        if min(self.max_joint_rate, self.max_root_lin_rate, self.max_root_ang_rate, self.tracking_gain) <= 0:
            raise ValueError("tracker rates and gain must be positive")


def _rot6d(R):
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def track_flat(tracker: SurrogateTracker, x, ref, dt: float, layout: StateLayout) -> np.ndarray:
    """First-order rate-limited pursuit on flat states."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=np.float64)
    out = x.copy()
    g = tracker.tracking_gain * dt
    js = layout.joint_slice
    lim = tracker.max_joint_rate * dt
    out[js] = x[js] + np.clip(g * (ref[js] - x[js]), -lim, lim)
    if layout.has_root_position:
        ps = layout.pos_slice
        step = g * (ref[ps] - x[ps])
        n = np.linalg.norm(step)
        lim = tracker.max_root_lin_rate * dt
        out[ps] = x[ps] + (step * (lim / n) if n > lim else step)
    rs = layout.rot_slice
    R_cur = matrices_from_rot6d(x[rs])
    R_ref = matrices_from_rot6d(ref[rs])
    w = matrix_log(R_ref @ R_cur.T)
    angle = float(np.linalg.norm(w))
    if angle > 0:
        step = min(g * angle, tracker.max_root_ang_rate * dt)
        out[rs] = _rot6d(axis_angle_matrix(w / angle, step) @ R_cur)
    return out


def step_tracker(tracker: SurrogateTracker, current: StateVector, reference: StateVector, dt: float) -> StateVector:
    layout = current.layout
    return unflatten(track_flat(tracker, flatten(current), flatten(reference), dt, layout), layout)


# ---------------------------------------------------------------- disturbances


@dataclass(frozen=True)
class Kick:
    time_s: float
    channel: str  # "root_pos" (m, world), "root_rot" (rotation vector, rad, world) or "joints" (rad)
    magnitude: tuple


@dataclass
class Disturbance:
    schedule: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"schedule": [asdict(k) for k in self.schedule]}

    @classmethod
    def from_dict(cls, d) -> "Disturbance":
        return cls([Kick(float(k["time_s"]), k["channel"], tuple(k["magnitude"])) for k in d.get("schedule", [])])

    @classmethod
    def load(cls, path) -> "Disturbance":
        return cls.from_dict(json.loads(Path(path).read_text()))


def apply_kick(x, kick: Kick, layout: StateLayout) -> np.ndarray:
    x = np.array(x, dtype=np.float64, copy=True)
    v = np.asarray(kick.magnitude, dtype=np.float64)
    if kick.channel == "root_pos":
        if layout.has_root_position:
            x[layout.pos_slice] += v
    elif kick.channel == "root_rot":
        angle = np.linalg.norm(v)
        if angle > 0:
            R = matrices_from_rot6d(x[layout.rot_slice])
            x[layout.rot_slice] = _rot6d(axis_angle_matrix(v / angle, angle) @ R)
    elif kick.channel == "joints":
        x[layout.joint_slice] += v
    else:
        raise ValueError(f"unknown disturbance channel {kick.channel!r}")
    return x


def sample_push(rng: np.random.Generator, push_duration_s: float, time_s: float = 0.0) -> list[Kick]:
    """One push from the push-velocity table, integrated over ``push_duration_s``."""
    lin = rng.uniform(-1, 1, 3) * np.array([PUSH_LIN_XY, PUSH_LIN_XY, PUSH_LIN_Z]) * push_duration_s
    ang = rng.uniform(-1, 1, 3) * np.array([PUSH_ANG_RP, PUSH_ANG_RP, PUSH_ANG_Y]) * push_duration_s
    return [Kick(time_s, "root_pos", tuple(lin)), Kick(time_s, "root_rot", tuple(ang))]


def sample_push_schedule(rng: np.random.Generator, duration_s: float, push_duration_s: float,
                         interval_s=PUSH_INTERVAL_S) -> Disturbance:
    kicks, t = [], rng.uniform(*interval_s)
    while t < duration_s:
        kicks += sample_push(rng, push_duration_s, t)
        t += rng.uniform(*interval_s)
    return Disturbance(kicks)


# ---------------------------------------------------------------- generators


class ModelGenerator:
    def __init__(self, model, sampler: Optional[SamplerConfig] = None):
        self.model = model
        self.sampler = sampler or SamplerConfig()
        self.layout = model.layout
        self.horizon_s = model.horizon_s
        self.times = keyframe_times(model)

    def __call__(self, p, m, step: int, rng) -> KeyframeTrajectory:
        frames = generate_batch(self.model, p[None], m[None], self.sampler, rng)[0]
        return KeyframeTrajectory(self.layout, self.horizon_s, frames, self.times)


class LinearPriorGenerator:
    """Directional prior alone: straight residual ramp toward the command."""

    def __init__(self, layout: StateLayout, K: int = 8, H: int = 10, fps: float = 50.0):
        self.layout, self.K = layout, K
        self.horizon_s = H / fps
        self.times = keyframe_offsets(K, H) / fps

    def __call__(self, p, m, step: int, rng) -> KeyframeTrajectory:
        return KeyframeTrajectory(self.layout, self.horizon_s, p + directional_prior(p, m, self.K), self.times)


class OracleGenerator:
    """Returns the clip's true upcoming keyframes, ignoring the state."""

    def __init__(self, clip: MotionClip, K: int = 8, H: int = 10):
        self.clip, self.K = clip, K
        self.offsets = keyframe_offsets(K, H)
        self.layout = clip.layout
        self.horizon_s = H / clip.fps
        self.times = self.offsets / clip.fps

    def __call__(self, p, m, step: int, rng) -> KeyframeTrajectory:
        idx = np.minimum(step + self.offsets, len(self.clip) - 1)
        return KeyframeTrajectory(self.layout, self.horizon_s, self.clip.frames[idx], self.times)


# ---------------------------------------------------------------- metrics


def orientation_error_no_yaw(R_cur, R_ref) -> np.ndarray:
    """Tilt angle of the relative rotation after removing its twist about world z."""
    R_rel = R_cur @ np.swapaxes(R_ref, -1, -2)
    # swing angle = angle between z and R_rel z
    return np.arccos(np.clip(R_rel[..., 2, 2], -1.0, 1.0))


@dataclass
class EpisodeMetrics:
    completion_rate: float
    joint_err: float
    height_err: float
    ori_err: float
    linvel_err: float
    frames: int
    aborted: bool = False


@dataclass
class HarnessConfig:
    n_exec: int = 2
    command_lookahead: int = 0  # frames between the current time and the command frame m_t
    height_threshold: float = REF_HEIGHT_THRESHOLD
    ori_threshold: float = REF_ORI_THRESHOLD

    @classmethod
    def scaled(cls, robot_height: float, **kw) -> "HarnessConfig":
        return cls(height_threshold=REF_HEIGHT_THRESHOLD * robot_height / REF_ROBOT_HEIGHT, **kw)


@dataclass
class EpisodeResult:
    metrics: EpisodeMetrics
    trace: list
    states: np.ndarray      # (T, D) realized states, row 0 = initial
    replan_steps: list
    per_frame: dict


def frame_errors(states, refs, layout: StateLayout, fps: float) -> dict:
    """Per-frame error channels for realized states vs reference frames (both (T, D))."""
    states, refs = np.asarray(states), np.asarray(refs)
    js = layout.joint_slice
    joint = np.linalg.norm(states[:, js] - refs[:, js], axis=1)
    R = matrices_from_rot6d(states[:, layout.rot_slice])
    R_ref = matrices_from_rot6d(refs[:, layout.rot_slice])
    ori = orientation_error_no_yaw(R, R_ref)
    if layout.has_root_position:
        ps = layout.pos_slice
        height = np.abs(states[:, ps][:, 2] - refs[:, ps][:, 2])
        v = np.diff(states[:, ps], axis=0, prepend=states[:1, ps]) * fps
        v_ref = np.diff(refs[:, ps], axis=0, prepend=refs[:1, ps]) * fps
        body = np.einsum("tji,tj->ti", R, v)
        body_ref = np.einsum("tji,tj->ti", R_ref, v_ref)
        linvel = np.linalg.norm(body - body_ref, axis=1)
        linvel[0] = 0.0
    else:
        height = np.zeros(len(states))
        linvel = np.zeros(len(states))
    return {"joint": joint, "height": height, "ori": ori, "linvel": linvel}


def completion(per_frame: dict, height_threshold: float, ori_threshold: float, total: Optional[int] = None) -> float:
    ok = (per_frame["height"] < height_threshold) & (per_frame["ori"] < ori_threshold)
    n = total if total is not None else len(ok)
    return float(np.sum(ok) / n) if n else 1.0


def run_episode(generator: Callable, tracker: SurrogateTracker, clip: MotionClip, disturbances: Optional[Disturbance],
                cfg: HarnessConfig, rng: np.random.Generator, initial_state=None,
                record_trace: bool = True) -> EpisodeResult:
    layout = clip.layout
    if generator.layout != layout:
        raise ValueError("clip layout does not match the generator")
    fps, dt, T = clip.fps, 1.0 / clip.fps, len(clip)
    kicks = sorted(disturbances.schedule if disturbances else [], key=lambda k: k.time_s)
    x = clip.frames[0].copy() if initial_state is None else np.asarray(initial_state, dtype=np.float64).copy()
    n_dense = int(round(generator.horizon_s * fps)) + 1
    buffer = ReferenceBuffer(T + n_dense, layout.total_dim, fps)
    states = [x.copy()]
    replans, aborted = [], False
    ki = 0
    for i in range(T - 1):
        if i % cfg.n_exec == 0:
            traj = generator(x, clip.frames[min(i + cfg.command_lookahead, T - 1)], i, rng)
            buffer.write(densify(traj, fps), i)
            replans.append(i)
        x = track_flat(tracker, x, buffer.read(i + 1), dt, layout)
        t_next = (i + 1) * dt
        while ki < len(kicks) and kicks[ki].time_s <= t_next + 1e-12:
            x = apply_kick(x, kicks[ki], layout)
            ki += 1
        if not np.all(np.isfinite(x)):
            aborted = True
            log.warning("episode %s aborted at step %d: non-finite state", clip.name, i)
            break
        states.append(x.copy())
    states = np.asarray(states)
    refs = clip.frames[: len(states)]
    per = frame_errors(states, refs, layout, fps)
    scored = {k: v[1:] for k, v in per.items()}  # frame 0 is the given initial state
    total = T - 1
    cr = completion(scored, cfg.height_threshold, cfg.ori_threshold, total)

    def mean(v):
        return float(np.mean(v)) if len(v) else 0.0

    metrics = EpisodeMetrics(cr, mean(scored["joint"]), mean(scored["height"]), mean(scored["ori"]),
                             mean(scored["linvel"]), total, aborted)
    trace = []
    if record_trace:
        for j in range(len(states)):
            trace.append({"t": j * dt, "state": states[j].tolist(), "reference": refs[j].tolist(),
                          "metrics": {k: float(per[k][j]) for k in per}})
    return EpisodeResult(metrics, trace, states, replans, per)


def distance_to_clip(x, clip: MotionClip) -> float:
    return float(np.min(np.linalg.norm(clip.frames - x, axis=1)))


# ---------------------------------------------------------------- suites


@dataclass
class EvalProtocol:
    variants: tuple = ("continuous", "discretized")
    dwell_s: float = 0.5
    push_duration_s: float = 1.0
    push_interval_s: tuple = PUSH_INTERVAL_S
    max_duration_s: float = 20.0
    robot_height: Optional[float] = None  # None: height of the default chain
    n_exec: int = 2
    command_lookahead: int = 0
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "EvalProtocol":
        d = dict(d)
        for k in ("variants", "push_interval_s"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def discretize(clip: MotionClip, dwell_s: float) -> MotionClip:
    """Piecewise-constant variant: each reference pose is held for ``dwell_s``."""
    n = max(1, int(round(dwell_s * clip.fps)))
    idx = (np.arange(len(clip)) // n) * n
    return MotionClip(clip.layout, clip.fps, clip.frames[idx], clip.name + "_discretized", clip.category)


def truncate(clip: MotionClip, max_duration_s: float) -> MotionClip:
    n = min(len(clip), int(round(max_duration_s * clip.fps)) + 1)
    return MotionClip(clip.layout, clip.fps, clip.frames[:n], clip.name, clip.category)


def evaluate_suite(generator_factory: Callable, corpus: Sequence[MotionClip], protocol: EvalProtocol,
                   tracker: Optional[SurrogateTracker] = None, jobs: int = 1) -> list[dict]:
    """One row per (clip, variant).  ``generator_factory(clip)`` returns a generator.

    Disturbance schedules and sampling noise derive from ``protocol.seed`` and the
    row index only, so variants evaluated with the same protocol see matched noise.
    """
    if not corpus:
        raise ValueError("empty corpus")
    from .kinematics import chain_height, default_chain

    tracker = tracker or SurrogateTracker()
    height = protocol.robot_height or chain_height(default_chain(), corpus[0].layout)
    cfg = HarnessConfig.scaled(height, n_exec=protocol.n_exec, command_lookahead=protocol.command_lookahead)
    jobs_list = []
    for ci, clip in enumerate(corpus):
        for vi, variant in enumerate(protocol.variants):
            jobs_list.append((ci, vi, clip, variant))

    def run(job):
        ci, vi, clip, variant = job
        clip = truncate(clip, protocol.max_duration_s)
        ref = discretize(clip, protocol.dwell_s) if variant == "discretized" else clip
        seq = np.random.SeedSequence([protocol.seed, ci, vi])
        dist_rng, sample_rng = (np.random.default_rng(s) for s in seq.spawn(2))
        dist = sample_push_schedule(dist_rng, (len(ref) - 1) / ref.fps, protocol.push_duration_s,
                                    protocol.push_interval_s)
        res = run_episode(generator_factory(ref), tracker, ref, dist, cfg, sample_rng, record_trace=False)
        row = {"clip": clip.name, "category": clip.category, "variant": variant}
        row.update(asdict(res.metrics))
        return row

    if jobs > 1:
        from joblib import Parallel, delayed

        return Parallel(n_jobs=jobs)(delayed(run)(j) for j in jobs_list)
    return [run(j) for j in jobs_list]


METRIC_KEYS = ("completion_rate", "joint_err", "height_err", "ori_err", "linvel_err")


def summarize(rows: Sequence[dict]) -> dict:
    return {k: float(np.mean([r[k] for r in rows])) for k in METRIC_KEYS} | {"episodes": len(rows)}


def write_results(rows: Sequence[dict], out_dir, meta: Optional[dict] = None) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out / "metrics.csv", out / "metrics.json"
    fields = ["clip", "category", "variant", *METRIC_KEYS, "frames", "aborted"]
    with open(csv_path, "w", newline="") as fh:
        if meta:
            fh.write("# " + json.dumps(meta, sort_keys=True) + "\n")
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.10g}" if isinstance(r[k], float) else r[k]) for k in fields})
    payload = {"meta": meta or {}, "summary": summarize(rows), "rows": list(rows)}
    json_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return csv_path, json_path
