"""Motion tokenizer: encoder -> bounded finite scalar quantizer -> decoder.

Each channel of the continuous latent is squashed into (-1, 1) and rounded to
one of ``L = 2**levels_exponent + 1`` uniform levels, so the centre level is an
exact zero.  Rounding is bypassed in the backward pass (straight-through).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .core_types import MotionClip, StateLayout

CHECKPOINT_FORMAT = "flowmid.tokenizer/1"
WINDOW = 10
BOUNDS = ("sigmoid16", "tanh")


@dataclass
class IfsqConfig:
    levels_exponent: int = 3
    embed_dim: int = 8
    bound: str = "sigmoid16"
    hidden: int = 128

    def __post_init__(self):
        if self.levels_exponent < 1:
            raise ValueError("levels_exponent must be >= 1")
        if self.bound not in BOUNDS:
            raise ValueError(f"bound must be one of {BOUNDS}, got {self.bound!r}")

    @property
    def levels(self) -> int:
        return 2 ** self.levels_exponent + 1


def bound_map(x, bound: str = "sigmoid16"):
    """Squash to (-1, 1).  ``sigmoid16`` is 2*sigmoid(1.6 x) - 1; accepts numpy or torch."""
    if isinstance(x, torch.Tensor):
        if bound == "sigmoid16":
            return 2.0 * torch.sigmoid(1.6 * x) - 1.0
        if bound == "tanh":
            return torch.tanh(x)
    else:
        x = np.asarray(x, dtype=np.float64)
        if bound == "sigmoid16":
            return 2.0 / (1.0 + np.exp(-1.6 * x)) - 1.0
        if bound == "tanh":
            return np.tanh(x)
    raise ValueError(f"unknown bound {bound!r}")


def level_index(f, L: int):
    """Index of the nearest level for bounded values ``f`` in [-1, 1]."""
    half = (L - 1) / 2
    if isinstance(f, torch.Tensor):
        return torch.clamp(torch.round(half * (f + 1)), 0, L - 1).long()
    return np.clip(np.rint(half * (np.asarray(f) + 1)), 0, L - 1).astype(np.int64)


def dequantize(index, L: int):
    """Bin centre in bounded space: 2 * index / (L - 1) - 1."""
    if isinstance(index, torch.Tensor):
        return 2.0 * index.double() / (L - 1) - 1.0
    return 2.0 * np.asarray(index, dtype=np.float64) / (L - 1) - 1.0


def quantize(z_c, cfg: IfsqConfig, offset=None):
    """Return ``(indices, z_q)``.

    For tensors ``z_q = f + stopgrad(z_hat - f)``.  Passing ``offset`` replaces the
    detached correction by a fixed tensor, which makes the map smooth in ``z_c``
    (used by finite-difference checks of the straight-through path).
    """
    L = cfg.levels
    f = bound_map(z_c, cfg.bound)
    idx = level_index(f, L)
    if isinstance(f, torch.Tensor):
        if offset is None:
            offset = (dequantize(idx, L).to(f.dtype) - f).detach()
        return idx, f + offset
    return idx, dequantize(idx, L)


# ---------------------------------------------------------------- model


class TokenizerModel(nn.Module):
    """Two-layer encoder (10-frame window -> d) and two-layer decoder (d -> window)."""

    def __init__(self, layout: StateLayout, cfg: Optional[IfsqConfig] = None, mean=None, std=None,
                 dtype: torch.dtype = torch.float64):
        super().__init__()
        self.layout, self.cfg = layout, cfg or IfsqConfig()
        n_in, h, d = WINDOW * layout.total_dim, self.cfg.hidden, self.cfg.embed_dim
        self.register_buffer("mean", torch.as_tensor(np.zeros(layout.total_dim) if mean is None else mean))
        self.register_buffer("std", torch.as_tensor(np.ones(layout.total_dim) if std is None else std))
        self.encoder = nn.Sequential(nn.Linear(n_in, h), nn.SiLU(), nn.Linear(h, d))
        self.decoder = nn.Sequential(nn.Linear(d, h), nn.SiLU(), nn.Linear(h, n_in))
        self.to(dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self.encoder[0].weight.dtype

    def _check(self, windows: torch.Tensor):
        if windows.ndim != 3 or windows.shape[1:] != (WINDOW, self.layout.total_dim):
            raise ValueError(f"windows must be (N, {WINDOW}, {self.layout.total_dim}), got {tuple(windows.shape)}")

    def encode(self, windows: torch.Tensor) -> torch.Tensor:
        self._check(windows)
        x = (windows - self.mean) / self.std
        return self.encoder(x.reshape(x.shape[0], -1))

    def decode(self, z_q: torch.Tensor) -> torch.Tensor:
        out = self.decoder(z_q).reshape(z_q.shape[0], WINDOW, self.layout.total_dim)
        return out * self.std + self.mean

    def forward(self, windows: torch.Tensor, offset=None):
        z_c = self.encode(windows)
        idx, z_q = quantize(z_c, self.cfg, offset)
        return self.decode(z_q), z_c, idx

    def tokens(self, windows) -> np.ndarray:
        with torch.no_grad():
            z_c = self.encode(torch.as_tensor(np.asarray(windows), dtype=self.dtype))
            return quantize(z_c, self.cfg)[0].numpy()

    def save(self, path, config: Optional[dict] = None) -> None:
        torch.save({"format": CHECKPOINT_FORMAT, "cfg": asdict(self.cfg), "layout": self.layout.to_dict(),
                    "dtype": str(self.dtype).replace("torch.", ""), "state_dict": self.state_dict(),
                    "config": config or {}}, path)

    @classmethod
    def load(cls, path) -> "TokenizerModel":
        ck = torch.load(path, map_location="cpu", weights_only=False)
        if ck.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {ck.get('format')!r}")
        model = cls(StateLayout.from_dict(ck["layout"]), IfsqConfig(**ck["cfg"]), dtype=getattr(torch, ck["dtype"]))
        model.load_state_dict(ck["state_dict"])
        return model


def reconstruction_loss(model: TokenizerModel, windows: torch.Tensor, offset=None) -> torch.Tensor:
    """Per window, mean over the 10 frames of the squared frame error; averaged over the batch."""
    recon, _, _ = model(windows, offset)
    return torch.mean(torch.sum((recon - windows) ** 2, dim=-1))


# ---------------------------------------------------------------- data + training


def clip_windows(clip: MotionClip, stride: int = 1) -> np.ndarray:
    n = len(clip) - WINDOW + 1
    if n < 1:
        return np.empty((0, WINDOW, clip.layout.total_dim))
    starts = np.arange(0, n, stride)
    return clip.frames[starts[:, None] + np.arange(WINDOW)]


def corpus_windows(corpus: Sequence[MotionClip], stride: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Stacked windows and the index of the clip each came from."""
    ws = [clip_windows(c, stride) for c in corpus]
    owner = np.concatenate([np.full(len(w), i) for i, w in enumerate(ws)])
    return np.concatenate(ws), owner


@dataclass
class TokenizerTrainConfig:
    steps: int = 1500
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 0.0
    window_stride: int = 2


@dataclass
class TokenizerTrainResult:
    model: TokenizerModel
    losses: list = field(default_factory=list)


def tokenizer_for_corpus(corpus: Sequence[MotionClip], cfg: IfsqConfig, seed: int = 0,
                         dtype: torch.dtype = torch.float64) -> TokenizerModel:
    frames = np.concatenate([c.frames for c in corpus])
    torch.manual_seed(seed)
    return TokenizerModel(corpus[0].layout, cfg, frames.mean(axis=0), np.maximum(frames.std(axis=0), 1e-3), dtype)


def train_tokenizer(model: TokenizerModel, windows: np.ndarray, cfg: TokenizerTrainConfig,
                    rng: np.random.Generator) -> TokenizerTrainResult:
    if len(windows) == 0:
        raise ValueError("no training windows")
    gen = torch.Generator().manual_seed(int(rng.integers(2**62)))
    data = torch.as_tensor(windows, dtype=model.dtype)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    losses = []
    model.train()
    for _ in range(cfg.steps):
        idx = torch.randint(len(data), (min(cfg.batch_size, len(data)),), generator=gen)
        opt.zero_grad(set_to_none=True)
        loss = reconstruction_loss(model, data[idx])
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite reconstruction loss after {len(losses)} steps")
        loss.backward()
        opt.step()
        losses.append(loss.item())
    model.eval()
    return TokenizerTrainResult(model, losses)


# ---------------------------------------------------------------- analytics


@dataclass
class Utilization:
    histograms: np.ndarray  # (d, L) index counts per latent channel
    entropy: np.ndarray     # (d,) normalized to [0, 1]

    @property
    def mean_entropy(self) -> float:
        return float(np.mean(self.entropy))

    def rows(self) -> list[dict]:
        return [{"dim": j, "entropy": float(self.entropy[j]), **{f"level_{k}": int(c) for k, c in enumerate(h)}}
                for j, h in enumerate(self.histograms)]


def index_utilization(indices, L: int) -> Utilization:
    """Per-channel histogram and entropy (in units of log L) of integer codes (N, d)."""
    indices = np.asarray(indices)
    if indices.ndim != 2 or len(indices) == 0:
        raise ValueError("indices must be a non-empty (N, d) array")
    hist = np.stack([np.bincount(indices[:, j], minlength=L) for j in range(indices.shape[1])])
    p = hist / hist.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.sum(np.where(p > 0, p * np.log(p), 0.0), axis=1)
    return Utilization(hist, np.clip(h / np.log(L), 0.0, 1.0))


def codebook_utilization(model: TokenizerModel, corpus: Sequence[MotionClip], stride: int = 1) -> Utilization:
    if not corpus:
        raise ValueError("empty corpus")
    windows, _ = corpus_windows(corpus, stride)
    return index_utilization(model.tokens(windows), model.cfg.levels)


def export_tokens(model: TokenizerModel, corpus: Sequence[MotionClip], stride: int = 1) -> list[tuple[list, str]]:
    """(index vector, category) per window, for external clustering plots."""
    windows, owner = corpus_windows(corpus, stride)
    codes = model.tokens(windows)
    return [(codes[i].tolist(), corpus[owner[i]].category) for i in range(len(codes))]
