"""Conditional flow-matching velocity field over K residual keyframe tokens.

A small transformer whose blocks are modulated (shift, scale, gate) by a shared
embedding of the conditioning vector ``[p, m]`` and the flow time.  Gates and
the output head start at zero so an untrained model is the zero field.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core_types import StateLayout
from .dataset import NormStats, TupleSet

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "flowmid.flow/1"
T_EMBED_DIM = 64


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class Arch:
    blocks: int = 3
    heads: int = 4
    dim: int = 128
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")


FULL_SCALE_ARCH = Arch(6, 4, 512)


def timestep_embedding(t: torch.Tensor, dim: int = T_EMBED_DIM, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype) / half)
    args = (t * 1000.0)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def modulate(x, shift, scale):
    return x * (1 + scale[:, None]) + shift[:, None]


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(approximate="tanh"),
                                 nn.Linear(mlp_ratio * dim, dim))
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(dim, 6 * dim))
        nn.init.zeros_(self.ada[1].weight)
        nn.init.zeros_(self.ada[1].bias)

    def attention(self, x):
        N, K, C = x.shape
        qkv = self.qkv(x).reshape(N, K, 3, self.heads, C // self.heads).permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(qkv[0], qkv[1], qkv[2])
        return self.proj(out.transpose(1, 2).reshape(N, K, C))

    def forward(self, x, c):
        shift1, scale1, gate1, shift2, scale2, gate2 = self.ada(c).chunk(6, dim=-1)
        x = x + gate1[:, None] * self.attention(modulate(self.norm1(x), shift1, scale1))
        x = x + gate2[:, None] * self.mlp(modulate(self.norm2(x), shift2, scale2))
        return x


class FlowModel(nn.Module):
    def __init__(self, layout: StateLayout, K: int, horizon_s: float, arch: Optional[Arch] = None,
                 norm: Optional[NormStats] = None, cond_mean=None, cond_std=None,
                 dtype: torch.dtype = torch.float64, H: Optional[int] = None):
        super().__init__()
        arch = arch or Arch()
        self.layout, self.K, self.horizon_s, self.arch = layout, int(K), float(horizon_s), arch
        # frames covered by the horizon; fixes the keyframe time grid
        self.H = int(H) if H else int(round(horizon_s * 50))
        D, dim = layout.total_dim, arch.dim
        self.norm = norm or NormStats(np.zeros(D), np.ones(D))
        self.register_buffer("cond_mean", torch.as_tensor(np.zeros(2 * D) if cond_mean is None else cond_mean))
        self.register_buffer("cond_std", torch.as_tensor(np.ones(2 * D) if cond_std is None else cond_std))
        self.token_in = nn.Linear(D, dim)
        self.pos = nn.Parameter(torch.randn(K, dim) * 0.02)
        self.cond_mlp = nn.Sequential(nn.Linear(2 * D + T_EMBED_DIM, dim), nn.SiLU(), nn.Linear(dim, dim))
        self.blocks = nn.ModuleList(Block(dim, arch.heads, arch.mlp_ratio) for _ in range(arch.blocks))
        self.final_norm = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.final_ada = nn.Sequential(nn.SiLU(), nn.Linear(dim, 2 * dim))
        self.out = nn.Linear(dim, D)
        for lin in (self.final_ada[1], self.out):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)
        self.to(dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self.out.weight.dtype

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        N, K, D = x_t.shape
        if K != self.K or D != self.layout.total_dim:
            raise ValueError(f"x_t must be (N, {self.K}, {self.layout.total_dim}), got {tuple(x_t.shape)}")
        if cond.shape != (N, 2 * D) or t.shape != (N,):
            raise ValueError(f"cond must be (N, {2 * D}) and t (N,), got {tuple(cond.shape)} / {tuple(t.shape)}")
        c_in = torch.cat([(cond - self.cond_mean) / self.cond_std, timestep_embedding(t)], dim=-1)
        c = self.cond_mlp(c_in)
        h = self.token_in(x_t) + self.pos
        for block in self.blocks:
            h = block(h, c)
        shift, scale = self.final_ada(c).chunk(2, dim=-1)
        return self.out(modulate(self.final_norm(h), shift, scale))

    def zero_field(self) -> "FlowModel":
        with torch.no_grad():
            self.out.weight.zero_()
            self.out.bias.zero_()
        return self

    def randomize(self, generator: torch.Generator, scale: float = 0.2) -> "FlowModel":
        """Fill every parameter with noise; used for gradient checks of a non-degenerate net."""
        with torch.no_grad():
            for p in self.parameters():
                p.copy_(torch.randn(p.shape, generator=generator, dtype=p.dtype) * scale)
        return self

    # ---------------------------------------------------------- checkpointing

    def save(self, path, config: Optional[dict] = None) -> None:
        torch.save({
            "format": CHECKPOINT_FORMAT,
            "arch": asdict(self.arch),
            "layout": self.layout.to_dict(),
            "K": self.K,
            "H": self.H,
            "horizon_s": self.horizon_s,
            "norm": self.norm.to_dict(),
            "dtype": str(self.dtype).replace("torch.", ""),
            "state_dict": self.state_dict(),
            "config": config or {},
        }, path)

    @classmethod
    def load(cls, path) -> "FlowModel":
        ck = torch.load(path, map_location="cpu", weights_only=False)
        if ck.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {ck.get('format')!r}")
        model = cls(StateLayout.from_dict(ck["layout"]), ck["K"], ck["horizon_s"], Arch(**ck["arch"]),
                    NormStats.from_dict(ck["norm"]), dtype=getattr(torch, ck["dtype"]), H=ck.get("H"))
        model.load_state_dict(ck["state_dict"])
        model.checkpoint_config = ck.get("config", {})
        return model


def model_for_dataset(data: TupleSet, norm: NormStats, arch: Optional[Arch] = None,
                      dtype: torch.dtype = torch.float64) -> FlowModel:
    cond_std = np.maximum(data.cond.std(axis=0), 1e-3)
    return FlowModel(data.layout, data.K, data.horizon_s, arch, norm, data.cond.mean(axis=0), cond_std, dtype,
                     H=data.config.get("H"))


# ---------------------------------------------------------------- objective


@dataclass
class FlowBatch:
    x0: torch.Tensor       # (N, K, D) normalized residuals
    cond: torch.Tensor     # (N, 2D)
    weights: torch.Tensor  # (N, K, D)
    t: torch.Tensor        # (N,)
    x1: torch.Tensor       # (N, K, D)

    def __post_init__(self):
        N = self.x0.shape[0]
        if self.x1.shape != self.x0.shape or self.weights.shape != self.x0.shape:
            raise ValueError("x0, x1 and weights must share one shape")
        if self.cond.shape[0] != N or self.t.shape != (N,):
            raise ValueError("cond and t must have one row per batch item")
        if torch.any(self.t < 0) or torch.any(self.t > 1):
            raise ValueError("flow times must lie in [0, 1]")


def flow_interpolate(x0, x1, t):
    t = torch.as_tensor(t, dtype=x0.dtype) if isinstance(x0, torch.Tensor) else np.asarray(t, dtype=np.float64)
    if t.ndim == 1:
        t = t.reshape(-1, *([1] * (x0.ndim - 1)))
    return (1 - t) * x0 + t * x1


def weighted_velocity_loss(model: FlowModel, batch: FlowBatch) -> torch.Tensor:
    x_t = flow_interpolate(batch.x0, batch.x1, batch.t)
    err = model(x_t, batch.t, batch.cond) - (batch.x1 - batch.x0)
    loss = torch.mean(batch.weights * err ** 2)
    if not torch.isfinite(loss):
        raise TrainingDivergence(f"non-finite loss {loss.item()}")
    return loss


def loss_and_grads(model: FlowModel, batch: FlowBatch) -> tuple[float, dict]:
    model.zero_grad(set_to_none=True)
    loss = weighted_velocity_loss(model, batch)
    loss.backward()
    return loss.item(), {n: p.grad.detach().clone() for n, p in model.named_parameters()}


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    steps: int = 4000
    batch_size: int = 256
    lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    lr_min_ratio: float = 0.0
    log_every: int = 0


@dataclass
class TrainResult:
    model: FlowModel
    losses: list = field(default_factory=list)


def _cosine_lr(cfg: TrainConfig, step: int) -> float:
    frac = step / max(1, cfg.steps)
    return cfg.lr * (cfg.lr_min_ratio + (1 - cfg.lr_min_ratio) * 0.5 * (1 + math.cos(math.pi * frac)))


def make_batch(model: FlowModel, data_x0, data_cond, data_w, idx, gen: torch.Generator) -> FlowBatch:
    x0, cond, w = data_x0[idx], data_cond[idx], data_w[idx]
    t = torch.rand(len(idx), generator=gen, dtype=model.dtype)
    x1 = torch.randn(x0.shape, generator=gen, dtype=model.dtype)
    return FlowBatch(x0, cond, w, t, x1)


def train(model: FlowModel, data: TupleSet, cfg: TrainConfig, rng: np.random.Generator) -> TrainResult:
    """AdamW with decoupled weight decay and a cosine-decayed learning rate.

    Per step: minibatch drawn with replacement, t ~ U(0, 1), x1 ~ N(0, I).
    """
    if len(data) == 0:
        raise ValueError("empty dataset")
    gen = torch.Generator().manual_seed(int(rng.integers(2**62)))
    dt = model.dtype
    x0_all = torch.as_tensor(model.norm.normalize(data.residual), dtype=dt)
    cond_all = torch.as_tensor(data.cond, dtype=dt)
    w_all = torch.as_tensor(data.weights, dtype=dt)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
                            weight_decay=cfg.weight_decay)
    losses = []
    model.train()
    for step in range(cfg.steps):
        lr = _cosine_lr(cfg, step)
        for g in opt.param_groups:
            g["lr"] = lr
        idx = torch.randint(len(data), (min(cfg.batch_size, len(data)) if cfg.batch_size else len(data),),
                            generator=gen)
        batch = make_batch(model, x0_all, cond_all, w_all, idx, gen)
        opt.zero_grad(set_to_none=True)
        try:
            loss = weighted_velocity_loss(model, batch)
        except TrainingDivergence as exc:
            recent = ", ".join(f"{v:.4g}" for v in losses[-5:])
            raise TrainingDivergence(f"step {step}, lr {lr:.3g}: {exc}; recent losses [{recent}]") from exc
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("step %d loss %.5f lr %.2e", step, losses[-1], lr)
    model.eval()
    return TrainResult(model, losses)
