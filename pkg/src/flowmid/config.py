"""Layered run configuration: built-in defaults < config file < environment < flags.

Keys are ``section.name``.  Environment overrides use ``FLOWMID_SECTION__NAME``.
Every artifact written by the CLI embeds the resolved configuration together
with a build identifier.
"""
from __future__ import annotations

import copy
import hashlib
import json
import os
import subprocess
from dataclasses import MISSING, asdict, fields
from pathlib import Path
from typing import Any, Mapping, Optional

import yaml

from .curriculum import BinState
from .dataset import DatasetConfig
from .flow_model import Arch, TrainConfig
from .harness import EvalProtocol, SurrogateTracker
from .sampler import SamplerConfig
from .ifsq_tokenizer import IfsqConfig, TokenizerTrainConfig

ENV_PREFIX = "FLOWMID_"


class ConfigError(ValueError):
    """Raised for unknown keys or values of the wrong type; ``key`` names the culprit."""

    def __init__(self, message: str, key: str = ""):
        super().__init__(message)
        self.key = key


def _defaults_of(cls, exclude=()) -> dict:
    return {f.name: copy.deepcopy(f.default) for f in fields(cls)
            if f.name not in exclude and f.default is not MISSING}


def default_config() -> dict:
    protocol = asdict(EvalProtocol())
    protocol["variants"] = list(protocol["variants"])
    protocol["push_interval_s"] = list(protocol["push_interval_s"])
    return {
        "seed": 0,
        "corpus": {"seed": 0, "scale": 1},
        "dataset": _defaults_of(DatasetConfig),
        "model": {**asdict(Arch()), "dtype": "float32"},
        "train": asdict(TrainConfig()),
        "sampler": asdict(SamplerConfig()),
        "tracker": asdict(SurrogateTracker()),
        "eval": protocol,
        "tokenizer": {**asdict(IfsqConfig()), **asdict(TokenizerTrainConfig()), "dtype": "float64"},
        "curriculum": _defaults_of(BinState, exclude=("F", "episodes")),
    }


def _coerce(value: Any, like: Any, key: str) -> Any:
    if like is None or value is None:
        return value
    if isinstance(like, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
        raise ConfigError(f"{key}: expected a boolean, got {value!r}", key)
    if isinstance(like, int) and not isinstance(value, bool):
        if isinstance(value, int) or (isinstance(value, float) and value.is_integer()):
            return int(value)
        if isinstance(value, str):
            try:
                return int(value)
            except ValueError:
                pass
        raise ConfigError(f"{key}: expected an integer, got {value!r}", key)
    if isinstance(like, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected a number, got {value!r}", key) from None
    if isinstance(like, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}", key)
        return value
    if isinstance(like, list):
        if isinstance(value, str):
            value = yaml.safe_load(value)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}", key)
        return list(value)
    return value


def merge(base: dict, overrides: Mapping, prefix: str = "") -> dict:
    """Recursively overlay ``overrides``; every key must already exist in ``base``."""
    out = copy.deepcopy(base)
    for k, v in overrides.items():
        key = f"{prefix}{k}"
        if k not in out:
            raise ConfigError(f"unknown configuration key {key!r}", key)
        if isinstance(out[k], dict):
            if not isinstance(v, Mapping):
                raise ConfigError(f"{key}: expected a mapping", key)
            out[k] = merge(out[k], v, key + ".")
        else:
            out[k] = _coerce(v, out[k], key)
    return out


def _nest(dotted: str, value: Any) -> dict:
    head, *rest = dotted.split(".", 1)
    return {head: _nest(rest[0], value) if rest else value}


def load_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config file {path}: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must contain a mapping at the top level")
    return data


def env_overrides(environ: Optional[Mapping[str, str]] = None) -> dict:
    environ = os.environ if environ is None else environ
    out: dict = {}
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX) or name == ENV_PREFIX + "CONFIG":
            continue
        dotted = name[len(ENV_PREFIX):].lower().replace("__", ".")
        out = _deep_update(out, _nest(dotted, yaml.safe_load(raw)))
    return out


def _deep_update(a: dict, b: Mapping) -> dict:
    for k, v in b.items():
        if isinstance(v, Mapping) and isinstance(a.get(k), dict):
            _deep_update(a[k], v)
        else:
            a[k] = v
    return a


def parse_assignments(items) -> dict:
    """``["train.steps=10", "seed=3"]`` -> nested overrides (values parsed as YAML scalars)."""
    out: dict = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value", item)
        k, v = item.split("=", 1)
        out = _deep_update(out, _nest(k.strip(), yaml.safe_load(v)))
    return out


def resolve(config_file=None, flag_overrides: Optional[Mapping] = None,
            environ: Optional[Mapping[str, str]] = None) -> dict:
    cfg = default_config()
    if config_file:
        cfg = merge(cfg, load_file(config_file))
    cfg = merge(cfg, env_overrides(environ))
    if flag_overrides:
        cfg = merge(cfg, flag_overrides)
    return cfg


def build_id() -> str:
    """Hash of the package sources, prefixed by the git revision when one is available."""
    here = Path(__file__).resolve().parent
    h = hashlib.sha256()
    for p in sorted(here.glob("*.py")):
        h.update(p.read_bytes())
    ident = "src-" + h.hexdigest()[:12]
    try:
        rev = subprocess.run(["git", "rev-parse", "--short=12", "HEAD"], cwd=here, capture_output=True,
                             text=True, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            ident = f"git-{rev.stdout.strip()}+{ident}"
    except (OSError, subprocess.SubprocessError):
        pass
    return ident


def provenance(cfg: dict) -> dict:
    return {"config": cfg, "build": build_id()}
