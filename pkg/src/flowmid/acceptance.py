"""Acceptance suite run by ``flowmid selftest`` and ``tests/test_acceptance.py``.

Criteria that need trained generators share one lazily built bundle: a full
model and two training ablations, all trained with the acceptance profile
(small network, short schedule) on the seed-0 synthetic corpus and evaluated
on the seed-123 held-out corpus.
"""
from __future__ import annotations

import contextlib
import io
import json
import math
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
from scipy import stats

from . import config as config_mod
from . import harness as hz
from . import pipeline as pl
from .core_types import KeyframeTrajectory, MotionClip, StateLayout, identity_rot6d, keyframe_offsets, save_corpus
from .curriculum import BinState, sample_bin, sampling_distribution
from .dataset import NormStats
from .densifier import dense_quaternions, densify, slerp
from .flow_model import Arch, FlowBatch, FlowModel, loss_and_grads, weighted_velocity_loss
from .kinematics import jacobian_weights_raw, planar_arm
from .sampler import SamplerConfig, directional_prior, generate_batch
from .synth_corpus import default_spec, generate_corpus
from .ifsq_tokenizer import (
    IfsqConfig,
    TokenizerModel,
    TokenizerTrainConfig,
    bound_map,
    codebook_utilization,
    corpus_windows,
    dequantize,
    level_index,
    quantize,
    reconstruction_loss,
    tokenizer_for_corpus,
    train_tokenizer,
)

TRAIN_SEED, HELDOUT_SEED = 0, 123
RUNTIME_BUDGET_S = 600.0

# Acceptance training profile: minutes on one CPU core instead of hours.
ACCEPTANCE_OVERRIDES = {
    "model": {"blocks": 2, "heads": 4, "dim": 64, "mlp_ratio": 4, "dtype": "float32"},
    "train": {"steps": 3000, "lr": 1e-3, "batch_size": 64},
}


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        info = ", ".join(f"{k}={_fmt(v)}" for k, v in self.detail.items())
        return f"[{status}] criterion {self.number:2d} {self.name} ({self.seconds:.1f}s): {info}"

    def record(self) -> dict:
        """Timing-free record, so reruns with the same seed serialize identically."""
        return {"number": self.number, "name": self.name, "passed": self.passed, "detail": _jsonable(self.detail)}


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4g}"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    if isinstance(v, dict):
        return "{" + ", ".join(f"{k}: {_fmt(x)}" for k, x in v.items()) + "}"
    return str(v)


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.floating, float)):
        return float(f"{float(v):.12g}")
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def acceptance_config(cfg: Optional[dict] = None) -> dict:
    return config_mod.merge(cfg or config_mod.default_config(), ACCEPTANCE_OVERRIDES)


# ---------------------------------------------------------------- shared bundle


class Bundle:
    """Corpora and trained generators, built on first use."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.train_corpus = generate_corpus(default_spec(TRAIN_SEED))
        self.heldout = generate_corpus(default_spec(HELDOUT_SEED))
        self._models: dict = {}

    def model(self, name: str) -> FlowModel:
        """``full``, ``noaug`` (no state noise) or ``nowt`` (unit loss weights); 64-bit copies."""
        if name not in self._models:
            override = {"full": {}, "noaug": {"augment": False}, "nowt": {"kinematic_weighting": False}}[name]
            model, *_ = pl.build_and_train(self.cfg, self.train_corpus, TRAIN_SEED, **override)
            self._models[name] = pl.inference_copy(model)
        return self._models[name]


# ---------------------------------------------------------------- helpers


def _rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    scale = max(float(a.norm()), float(b.norm()), 1e-12)
    return float((a - b).norm()) / scale


def _fd_check(params: dict, loss_fn: Callable[[], torch.Tensor], analytic: dict, rng: np.random.Generator,
              per_tensor: int, h: float = 1e-6) -> dict:
    """Central differences on a random subset of entries of every tensor; relative error per tensor."""
    errs = {}
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            idx = rng.choice(flat.numel(), size=min(per_tensor, flat.numel()), replace=False)
            fd = torch.empty(len(idx), dtype=p.dtype)
            for j, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                fd[j] = (up - down) / (2 * h)
            errs[name] = _rel_err(analytic[name].reshape(-1)[torch.as_tensor(idx)], fd)
    return errs


def _heldout_pairs(clips, n: int, K: int, H: int, rng: np.random.Generator):
    """(p, m, true keyframes) with p on a clip and m that clip's frame at the segment end."""
    offsets = keyframe_offsets(K, H)
    P, M, truth = [], [], []
    for i in range(n):
        clip = clips[i % len(clips)]
        s = int(rng.integers(0, len(clip) - H + 1))
        P.append(clip.frames[s])
        M.append(clip.frames[s + H - 1])
        truth.append(clip.frames[s + offsets])
    return np.asarray(P), np.asarray(M), np.asarray(truth)


def _recovery_distances(res: hz.EpisodeResult, clip: MotionClip) -> np.ndarray:
    pts = [res.states[i] for i in res.replan_steps] + [res.states[-1]]
    return np.array([hz.distance_to_clip(x, clip) for x in pts])


def recovery_phase(d: np.ndarray, fraction: float = 0.25) -> np.ndarray:
    """Distances up to and including the first replan at or below ``fraction`` of the start."""
    below = d <= fraction * d[0]
    return d[: int(np.argmax(below)) + 1] if below.any() else d


# ---------------------------------------------------------------- criteria


def c1_gradients(bundle: Bundle) -> CriterionResult:
    rng = np.random.default_rng(1)
    gen = torch.Generator().manual_seed(1)
    layout = StateLayout(2, False)
    D, K, N = layout.total_dim, 4, 3
    model = FlowModel(layout, K, 0.2, Arch(2, 2, 32), dtype=torch.float64).randomize(gen)
    batch = FlowBatch(
        x0=torch.randn(N, K, D, generator=gen, dtype=torch.float64),
        cond=torch.randn(N, 2 * D, generator=gen, dtype=torch.float64),
        weights=torch.rand(N, K, D, generator=gen, dtype=torch.float64) + 0.1,
        t=torch.rand(N, generator=gen, dtype=torch.float64),
        x1=torch.randn(N, K, D, generator=gen, dtype=torch.float64),
    )
    _, grads = loss_and_grads(model, batch)
    flow_err = _fd_check(dict(model.named_parameters()), lambda: weighted_velocity_loss(model, batch), grads, rng, 6)

    torch.manual_seed(2)
    tok = TokenizerModel(layout, IfsqConfig(levels_exponent=3, embed_dim=4, hidden=16), dtype=torch.float64)
    windows = torch.randn(5, 10, D, generator=gen, dtype=torch.float64)
    with torch.no_grad():
        f = bound_map(tok.encode(windows), tok.cfg.bound)
        offset = (dequantize(level_index(f, tok.cfg.levels), tok.cfg.levels) - f).detach()
    tok.zero_grad()
    reconstruction_loss(tok, windows, offset).backward()
    tgrads = {n: p.grad.detach().clone() for n, p in tok.named_parameters()}
    tok_err = _fd_check(dict(tok.named_parameters()), lambda: reconstruction_loss(tok, windows, offset),
                        tgrads, rng, 12)

    # gradient reaching the continuous latent through the straight-through path
    z_c = tok.encode(windows).detach().requires_grad_(True)
    def latent_loss():
        _, z_q = quantize(z_c, tok.cfg, offset)
        return torch.mean(torch.sum((tok.decode(z_q) - windows) ** 2, dim=-1))
    latent_loss().backward()
    z_err = _fd_check({"z_c": z_c.data}, latent_loss, {"z_c": z_c.grad.clone()}, rng, 20)

    worst = max(max(flow_err.values()), max(tok_err.values()), z_err["z_c"])
    return CriterionResult(1, "gradient fidelity", worst < 1e-4, {
        "flow_max_rel_err": max(flow_err.values()), "tokenizer_max_rel_err": max(tok_err.values()),
        "latent_rel_err": z_err["z_c"], "tensors_checked": len(flow_err) + len(tok_err) + 1})


def c2_jacobian_weights(bundle: Bundle) -> CriterionResult:
    l1, l2 = 1.0, 0.7
    chain, layout = planar_arm(l1, l2), StateLayout(2, False)
    rng = np.random.default_rng(2)
    X = np.zeros((100, layout.total_dim))
    X[:, :2] = rng.uniform(-np.pi, np.pi, (100, 2))
    X[:, layout.rot_slice] = identity_rot6d()
    W = jacobian_weights_raw(chain, X, layout)
    q2 = X[:, 1]
    analytic = np.stack([2 * l1 ** 2 + l2 ** 2 + 2 * l1 * l2 * np.cos(q2), np.full(100, l2 ** 2)], axis=1)
    err = float(np.max(np.abs(W[:, :2] - analytic)))
    return CriterionResult(2, "Jacobian weight oracle", err <= 1e-6, {"max_abs_err": err, "poses": 100})


def c3_near_identity(bundle: Bundle) -> CriterionResult:
    model = bundle.model("full")
    dcfg = pl.dataset_config(bundle.cfg)
    P, M, truth = _heldout_pairs(bundle.heldout, 200, dcfg.K, dcfg.H, np.random.default_rng(3))
    sampler = pl.sampler_config(bundle.cfg)
    out = generate_batch(model, P, M, sampler, np.random.default_rng(33))
    js = model.layout.joint_slice
    err = out[:, 1:, js] - truth[:, 1:, js]  # row 0 is pinned to p
    rmse = np.sqrt(np.mean(err ** 2, axis=(1, 2)))
    mean, p95 = float(rmse.mean()), float(np.percentile(rmse, 95))
    return CriterionResult(3, "near-identity tracking", mean <= 0.05 and p95 <= 0.15,
                           {"mean_joint_rmse": mean, "p95_joint_rmse": p95, "pairs": 200})


def c4_recovery(bundle: Bundle, trials: int = 100, window: int = 100) -> CriterionResult:
    model = bundle.model("full")
    proto = pl.eval_protocol(bundle.cfg)
    gen = hz.ModelGenerator(model, pl.sampler_config(bundle.cfg))
    cfg = hz.HarnessConfig(n_exec=proto.n_exec, command_lookahead=proto.command_lookahead)
    tracker = pl.tracker(bundle.cfg)
    monotone = final = 0
    ratios = []
    for s in range(trials):
        rng = np.random.default_rng([4, s])
        clip = bundle.heldout[s % len(bundle.heldout)]
        start = int(rng.integers(0, len(clip) - window))
        sub = MotionClip(clip.layout, clip.fps, clip.frames[start:start + window], clip.name, clip.category)
        x0 = sub.frames[0]
        for kick in hz.sample_push(rng, proto.push_duration_s):
            x0 = hz.apply_kick(x0, kick, clip.layout)
        res = hz.run_episode(gen, tracker, sub, None, cfg, rng, initial_state=x0, record_trace=False)
        d = _recovery_distances(res, sub)
        monotone += bool(np.all(np.diff(recovery_phase(d)) <= 0))
        final += bool(d[-1] < 0.25 * d[0])
        ratios.append(d[-1] / d[0])
    mono_rate, final_rate = monotone / trials, final / trials
    return CriterionResult(4, "recovery contraction", mono_rate >= 0.9 and final_rate >= 0.8, {
        "nonincreasing_rate": mono_rate, "final_below_25pct_rate": final_rate,
        "median_final_ratio": float(np.median(ratios)), "trials": trials})


def c5_ablations(bundle: Bundle, jobs: int = 1) -> CriterionResult:
    proto = pl.eval_protocol(bundle.cfg)
    tracker = pl.tracker(bundle.cfg)
    full_sampler = pl.sampler_config(bundle.cfg)
    runs = {
        "full": (bundle.model("full"), full_sampler),
        "no_warm_start": (bundle.model("full"), pl.sampler_config(bundle.cfg, warm_start=False)),
        "no_augmentation": (bundle.model("noaug"), full_sampler),
        "no_kinematic_weighting": (bundle.model("nowt"), full_sampler),
    }
    cr = {}
    for name, (model, sampler) in runs.items():
        rows = hz.evaluate_suite(lambda clip, m=model, s=sampler: hz.ModelGenerator(m, s), bundle.heldout,
                                 proto, tracker, jobs)
        cr[name] = hz.summarize(rows)["completion_rate"]
    drops = {k: cr["full"] - v for k, v in cr.items() if k != "full"}
    ordering = sorted(drops, key=drops.get, reverse=True)
    return CriterionResult(5, "ablation trends", all(d > 0 for d in drops.values()), {
        "completion_rate": cr, "drop": drops, "effect_order": ordering})


def c6_sampler_exactness(bundle: Bundle) -> CriterionResult:
    model = bundle.model("full")
    P, M, _ = _heldout_pairs(bundle.heldout, 50, model.K, model.H, np.random.default_rng(6))
    out = generate_batch(model, P, M, pl.sampler_config(bundle.cfg), np.random.default_rng(66))
    pin_err = float(np.max(np.abs(out[:, 0] - P)))

    rng = np.random.default_rng(60)
    layout = StateLayout(3, True)
    D = layout.total_dim
    tiny = FlowModel(layout, 6, 0.2, Arch(1, 2, 16), NormStats(rng.normal(size=D), rng.uniform(0.5, 2.0, D)),
                     dtype=torch.float64).zero_field()
    P2, M2 = rng.normal(size=(20, D)), rng.normal(size=(20, D))
    cfg0 = SamplerConfig(euler_steps=5, t_start=1e-12)
    lin = P2[:, None, :] + directional_prior(P2, M2, tiny.K)
    prior_err = float(np.max(np.abs(generate_batch(tiny, P2, M2, cfg0, rng) - lin)))
    return CriterionResult(6, "sampler exactness", pin_err <= 1e-9 and prior_err <= 1e-9,
                           {"pin_max_err": pin_err, "zero_field_prior_max_err": prior_err})


def entropy_comparison(corpus, seeds=(0, 1, 2), tcfg: Optional[TokenizerTrainConfig] = None) -> dict:
    """Matched-seed training of both bounds; returns per-seed mean code entropies."""
    tcfg = tcfg or TokenizerTrainConfig()
    windows, _ = corpus_windows(corpus, tcfg.window_stride)
    torch.set_num_threads(1)
    out = {}
    for bound in ("sigmoid16", "tanh"):
        vals = []
        for seed in seeds:
            model = tokenizer_for_corpus(corpus, IfsqConfig(bound=bound), seed)
            train_tokenizer(model, windows, tcfg, np.random.default_rng(seed))
            vals.append(codebook_utilization(model, corpus).mean_entropy)
        out[bound] = vals
    return out


def c7_ifsq(bundle: Bundle) -> CriterionResult:
    zero_ok = True
    for k in (2, 3, 4):  # L = 5, 9, 17
        for bound in ("sigmoid16", "tanh"):
            cfg = IfsqConfig(levels_exponent=k, bound=bound)
            idx, zq = quantize(np.zeros(4), cfg)
            zero_ok &= bool(np.all(idx == (cfg.levels - 1) // 2) and np.all(zq == 0.0))
    rng = np.random.default_rng(7)
    z = rng.normal(scale=3.0, size=10 ** 6)
    worst = 0.0
    for k in (2, 3, 4):
        for bound in ("sigmoid16", "tanh"):
            cfg = IfsqConfig(levels_exponent=k, bound=bound)
            _, zq = quantize(z, cfg)
            excess = np.max(np.abs(zq - bound_map(z, bound))) - 1.0 / (cfg.levels - 1)
            worst = max(worst, float(excess))
    half_bin_ok = worst <= 1e-12
    ent = entropy_comparison(bundle.train_corpus)
    sig, tanh = float(np.mean(ent["sigmoid16"])), float(np.mean(ent["tanh"]))
    return CriterionResult(7, "iFSQ contracts", zero_ok and half_bin_ok and sig >= tanh, {
        "zero_state_exact": zero_ok, "half_bin_excess": worst, "entropy_sigmoid16": ent["sigmoid16"],
        "entropy_tanh": ent["tanh"], "mean_sigmoid16": sig, "mean_tanh": tanh})


def c8_curriculum(bundle: Bundle) -> CriterionResult:
    rng = np.random.default_rng(8)
    worst_sum, worst_floor = 0.0, 0.0
    for _ in range(10 ** 4):
        B = int(rng.integers(1, 65))
        F = rng.exponential(size=B) * (rng.random(B) < rng.random())
        state = BinState(B=B, eta=float(rng.random()), cap=float(rng.uniform(0.5, 5)),
                         kernel_decay=float(rng.uniform(0.2, 3)), kernel_radius=int(rng.integers(0, 6)),
                         warmup_episodes=int(rng.integers(0, 3)), F=F, episodes=int(rng.integers(0, 3)))
        P = sampling_distribution(state)
        worst_sum = max(worst_sum, abs(P.sum() - 1.0))
        worst_floor = max(worst_floor, float(np.max((1 - state.eta) / B - P)))
    valid = worst_sum <= 1e-12 and worst_floor <= 1e-15
    ex = BinState(B=4, eta=0.5, cap=100.0, kernel_radius=0, F=np.array([0.4, 0.3, 0.2, 0.1]), episodes=1)
    example_err = float(np.max(np.abs(sampling_distribution(ex) - [0.325, 0.275, 0.225, 0.175])))
    chi_state = BinState(B=16, F=rng.exponential(size=16), episodes=1)
    draw_rng = np.random.default_rng(88)
    counts = np.bincount([sample_bin(chi_state, draw_rng) for _ in range(10 ** 5)], minlength=16)
    p_value = float(stats.chisquare(counts, 10 ** 5 * sampling_distribution(chi_state)).pvalue)
    return CriterionResult(8, "curriculum contracts", valid and example_err <= 1e-15 and p_value > 1e-3, {
        "max_sum_err": worst_sum, "max_floor_violation": worst_floor, "worked_example_err": example_err,
        "chi_square_p": p_value})


def c9_densifier(bundle: Bundle) -> CriterionResult:
    rng = np.random.default_rng(9)
    layout = StateLayout(4, True)
    K, H, fps = 8, 10, 50.0
    times = keyframe_offsets(K, H) / fps
    frames = rng.normal(scale=0.5, size=(K, layout.total_dim))
    rots = [np.linalg.qr(rng.normal(size=(3, 3)))[0] for _ in range(K)]
    rots = [R * np.sign(np.linalg.det(R)) for R in rots]
    frames[:, layout.rot_slice] = [np.r_[R[:, 0], R[:, 1]] for R in rots]
    traj = KeyframeTrajectory(layout, H / fps, frames, times)
    scalar = list(range(layout.joint_count)) + list(range(layout.total_dim)[layout.pos_slice])

    dense = densify(traj, fps)
    knot_err = float(np.max(np.abs(dense.frames[np.rint(times * fps).astype(int)][:, scalar] - frames[:, scalar])))

    coef = rng.normal(size=(4, len(scalar)))
    def cubic(t):
        t = np.asarray(t)[:, None]
        return coef[0] + coef[1] * t + coef[2] * t ** 2 + coef[3] * t ** 3
    poly = frames.copy()
    poly[:, scalar] = cubic(times)
    dpoly = densify(KeyframeTrajectory(layout, H / fps, poly, times), fps)
    t_grid = np.minimum(np.arange(len(dpoly)) / fps, times[-1])
    cubic_err = float(np.max(np.abs(dpoly.frames[:, scalar] - cubic(t_grid))))

    # one-sided four-point slopes are exact on each cubic piece, leaving only roundoff
    fine = 50.0 * 10 ** 3
    f = densify(traj, fine).frames[:, layout.joint_slice]
    h = 1.0 / fine
    c1_err = 0.0
    for tk in times[1:-1]:
        i = int(round(tk * fine))
        left = (11 * f[i] - 18 * f[i - 1] + 9 * f[i - 2] - 2 * f[i - 3]) / (6 * h)
        right = (-11 * f[i] + 18 * f[i + 1] - 9 * f[i + 2] + 2 * f[i + 3]) / (6 * h)
        c1_err = max(c1_err, float(np.max(np.abs(left - right))))

    q_mid = slerp([1.0, 0, 0, 0], [math.cos(math.pi / 4), 0, 0, math.sin(math.pi / 4)], 0.5)
    oracle = np.array([0.9238795325112867, 0.0, 0.0, 0.3826834323650898])
    two = np.tile(np.r_[np.zeros(layout.joint_count + 3), identity_rot6d()], (2, 1))
    two[1, layout.rot_slice] = [0, 1, 0, -1, 0, 0]
    mid = dense_quaternions(densify(KeyframeTrajectory(layout, 0.2, two, np.array([0.0, 0.2])), fps))[5]
    slerp_err = max(float(np.max(np.abs(q_mid - oracle))), float(np.max(np.abs(mid - oracle))))

    q = dense_quaternions(dense)
    unit_err = float(np.max(np.abs(np.linalg.norm(q, axis=1) - 1.0)))
    hemi_ok = bool(np.all(np.sum(q[1:] * q[:-1], axis=1) >= 0))
    ok = knot_err <= 1e-9 and cubic_err <= 1e-9 and c1_err <= 1e-6 and slerp_err <= 1e-9 and unit_err <= 1e-9 \
        and hemi_ok
    return CriterionResult(9, "densifier contracts", ok, {
        "knot_err": knot_err, "cubic_err": cubic_err, "c1_err": c1_err, "slerp_mid_err": slerp_err,
        "unit_norm_err": unit_err, "hemisphere_continuous": hemi_ok})


def c10_determinism(bundle: Bundle, jobs: int, t_start: float) -> CriterionResult:
    from .cli import main

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        ckpt = tmp / "model.pt"
        bundle.model("full").save(ckpt)
        save_corpus(bundle.heldout[::8], tmp / "corpus")
        outs = []
        for run in ("a", "b"):
            with contextlib.redirect_stdout(io.StringIO()):
                code = main(["eval", "--checkpoint", str(ckpt), "--corpus", str(tmp / "corpus"), "--out",
                             str(tmp / run), "--seed", "5", "--jobs", str(jobs)])
            if code != 0:
                return CriterionResult(10, "determinism and budget", False, {"eval_exit_code": code})
            outs.append([(tmp / run / n).read_bytes() for n in ("metrics.csv", "metrics.json")])
        identical = outs[0] == outs[1]
    elapsed = time.perf_counter() - t_start
    return CriterionResult(10, "determinism and budget", identical and elapsed < RUNTIME_BUDGET_S, {
        "eval_files_identical": identical, "within_budget": elapsed < RUNTIME_BUDGET_S})


# ---------------------------------------------------------------- driver


def run_all(cfg: Optional[dict] = None, jobs: int = 1, out_dir=None,
            report: Optional[Callable[[CriterionResult], None]] = None) -> list[CriterionResult]:
    """Run criteria 1-10 in order; writes ``acceptance.json`` (timing-free) when ``out_dir`` is set.

    Criterion 10 compares two ``eval`` runs byte for byte; the same holds for
    ``acceptance.json`` across selftest runs because every draw is seeded and
    torch runs single-threaded.
    """
    torch.set_num_threads(1)
    t_start = time.perf_counter()
    bundle = Bundle(acceptance_config(cfg))
    steps = [
        lambda: c1_gradients(bundle),
        lambda: c2_jacobian_weights(bundle),
        lambda: c3_near_identity(bundle),
        lambda: c4_recovery(bundle),
        lambda: c5_ablations(bundle, jobs),
        lambda: c6_sampler_exactness(bundle),
        lambda: c7_ifsq(bundle),
        lambda: c8_curriculum(bundle),
        lambda: c9_densifier(bundle),
        lambda: c10_determinism(bundle, jobs, t_start),
    ]
    results = []
    for fn in steps:
        t0 = time.perf_counter()
        res = fn()
        res.seconds = time.perf_counter() - t0
        results.append(res)
        if report:
            report(res)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        doc = {"provenance": config_mod.provenance(bundle.cfg), "criteria": [r.record() for r in results]}
        (out / "acceptance.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return results
