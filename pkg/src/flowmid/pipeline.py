"""Glue from a resolved run configuration to the library objects."""
from __future__ import annotations

from dataclasses import fields
from typing import Optional, Sequence

import numpy as np
import torch

from .core_types import MotionClip
from .dataset import DatasetConfig, NormStats, TupleSet, build_dataset
from .flow_model import Arch, FlowModel, TrainConfig, model_for_dataset, train
from .harness import EvalProtocol, SurrogateTracker
from .sampler import SamplerConfig
from .synth_corpus import default_spec, generate_corpus
from .ifsq_tokenizer import IfsqConfig, TokenizerTrainConfig


def pick(cls, section: dict, **override):
    """Instantiate dataclass ``cls`` from the keys of ``section`` it declares."""
    names = {f.name for f in fields(cls)}
    kw = {k: v for k, v in section.items() if k in names}
    kw.update(override)
    return cls(**kw)


def dataset_config(cfg: dict, **override) -> DatasetConfig:
    return pick(DatasetConfig, cfg["dataset"], **override)


def sampler_config(cfg: dict, **override) -> SamplerConfig:
    return pick(SamplerConfig, cfg["sampler"], **override)


def eval_protocol(cfg: dict, **override) -> EvalProtocol:
    sec = dict(cfg["eval"])
    sec["variants"] = tuple(sec["variants"])
    sec["push_interval_s"] = tuple(sec["push_interval_s"])
    return pick(EvalProtocol, sec, **override)


def tracker(cfg: dict) -> SurrogateTracker:
    return pick(SurrogateTracker, cfg["tracker"])


def ifsq_config(cfg: dict, **override) -> IfsqConfig:
    return pick(IfsqConfig, cfg["tokenizer"], **override)


def tokenizer_train_config(cfg: dict, **override) -> TokenizerTrainConfig:
    return pick(TokenizerTrainConfig, cfg["tokenizer"], **override)


def torch_dtype(name: str) -> torch.dtype:
    try:
        dt = getattr(torch, name)
    except AttributeError:
        dt = None
    if dt not in (torch.float32, torch.float64):
        raise ValueError(f"dtype must be float32 or float64, got {name!r}")
    return dt


def synthetic_corpus(cfg: dict, seed_offset: int = 0) -> list[MotionClip]:
    c = cfg["corpus"]
    return generate_corpus(default_spec(int(c["seed"]) + seed_offset, int(c["scale"])))


def train_flow(cfg: dict, data: TupleSet, norm: NormStats, seed: int) -> tuple[FlowModel, list]:
    """Train a fresh model on ``data``; torch runs single-threaded so results are reproducible."""
    torch.set_num_threads(1)
    arch = pick(Arch, cfg["model"])
    torch.manual_seed(seed)
    model = model_for_dataset(data, norm, arch, torch_dtype(cfg["model"]["dtype"]))
    result = train(model, data, pick(TrainConfig, cfg["train"]), np.random.default_rng(seed))
    return result.model, result.losses


def build_and_train(cfg: dict, corpus: Sequence[MotionClip], seed: int,
                    **dataset_override) -> tuple[FlowModel, TupleSet, NormStats, list]:
    data, norm = build_dataset(corpus, dataset_config(cfg, **dataset_override), np.random.default_rng(seed))
    model, losses = train_flow(cfg, data, norm, seed + 1)
    return model, data, norm, losses


def inference_copy(model: FlowModel) -> FlowModel:
    """64-bit copy used for sampling and evaluation."""
    return model.double() if model.dtype == torch.float64 else _clone(model).double()


def _clone(model: FlowModel) -> FlowModel:
    clone = FlowModel(model.layout, model.K, model.horizon_s, model.arch, model.norm, dtype=model.dtype, H=model.H)
    clone.load_state_dict(model.state_dict())
    return clone
