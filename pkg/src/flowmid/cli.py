"""Command-line entry point.

Errors are reported as one JSON object on stderr; usage and configuration
errors exit with status 2, runtime failures with status 1.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import config as config_mod
from . import pipeline as pl
from .core_types import StateLayout, load_clip, load_corpus, save_corpus, unflatten
from .curriculum import BinState, dump_csv
from .dataset import TupleSet, build_dataset
from .flow_model import FlowModel
from .kinematics import chain_height, default_chain
from .harness import (
    Disturbance,
    HarnessConfig,
    ModelGenerator,
    evaluate_suite,
    run_episode,
    summarize,
    write_results,
)
from .sampler import generate_trajectory
from .synth_corpus import CorpusSpec, default_spec, generate_corpus
from .ifsq_tokenizer import (
    TokenizerModel,
    clip_windows,
    codebook_utilization,
    corpus_windows,
    tokenizer_for_corpus,
    train_tokenizer,
)

log = logging.getLogger("flowmid")

SUBCOMMANDS = ("gen-corpus", "build-dataset", "train", "train-tokenizer", "tokenize", "codebook-report",
               "sample", "rollout", "eval", "report", "selftest")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _json_dump(obj, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _state_from_json(text_or_path: str, layout: StateLayout):
    """A flat list, or a ``{"joints", "root_pos", "root_rot6d"}`` object, inline or in a file."""
    text = text_or_path.strip()
    raw = json.loads(text if text[:1] in "[{" else Path(text).read_text())
    if isinstance(raw, dict):
        parts = [raw["joints"]] + ([raw["root_pos"]] if layout.has_root_position else []) + [raw["root_rot6d"]]
        raw = np.concatenate([np.asarray(x, dtype=np.float64) for x in parts])
    return unflatten(np.asarray(raw, dtype=np.float64), layout)


# ---------------------------------------------------------------- commands


def cmd_gen_corpus(args, cfg):
    spec = CorpusSpec.load(args.spec) if args.spec else default_spec(cfg["corpus"]["seed"], cfg["corpus"]["scale"])
    clips = generate_corpus(spec)
    paths = save_corpus(clips, args.out)
    prov = config_mod.provenance(cfg) | {"corpus_spec": spec.to_dict()}
    for p in paths:  # extra key; clip readers ignore it
        doc = json.loads(p.read_text())
        doc["provenance"] = prov
        p.write_text(json.dumps(doc))
    return {"clips": len(paths), "out": str(args.out)}


def cmd_build_dataset(args, cfg):
    corpus = load_corpus(args.corpus)
    if not corpus:
        raise ValueError(f"no clips found in {args.corpus}")
    data, norm = build_dataset(corpus, pl.dataset_config(cfg), np.random.default_rng(cfg["seed"]))
    data.config = {**data.config, "provenance": config_mod.provenance(cfg)}
    data.save(args.out, norm)
    return {"tuples": len(data), "out": str(args.out)}


def cmd_train(args, cfg):
    data, norm = TupleSet.load(args.dataset)
    model, losses = pl.train_flow(cfg, data, norm, cfg["seed"])
    model.save(args.out, config_mod.provenance(cfg))
    return {"steps": len(losses), "final_loss": float(np.mean(losses[-50:])) if losses else None,
            "parameters": model.parameter_count(), "out": str(args.out)}


def cmd_train_tokenizer(args, cfg):
    import torch

    corpus = load_corpus(args.corpus)
    tcfg = pl.tokenizer_train_config(cfg)
    torch.set_num_threads(1)
    model = tokenizer_for_corpus(corpus, pl.ifsq_config(cfg), cfg["seed"], pl.torch_dtype(cfg["tokenizer"]["dtype"]))
    windows, _ = corpus_windows(corpus, tcfg.window_stride)
    res = train_tokenizer(model, windows, tcfg, np.random.default_rng(cfg["seed"]))
    model.save(args.out, config_mod.provenance(cfg))
    return {"steps": len(res.losses), "final_loss": float(np.mean(res.losses[-50:])), "out": str(args.out)}


def cmd_tokenize(args, cfg):
    model = TokenizerModel.load(args.checkpoint)
    clip = load_clip(args.clip)
    codes = model.tokens(clip_windows(clip, args.stride))
    doc = {"clip": clip.name, "category": clip.category, "levels": model.cfg.levels, "stride": args.stride,
           "tokens": codes.tolist(), "provenance": config_mod.provenance(cfg)}
    if args.out:
        _json_dump(doc, args.out)
        return {"windows": len(codes), "out": str(args.out)}
    return doc


def cmd_codebook_report(args, cfg):
    model = TokenizerModel.load(args.checkpoint)
    util = codebook_utilization(model, load_corpus(args.corpus))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = util.rows()
    with open(out, "w") as fh:
        fh.write("# " + json.dumps(config_mod.provenance(cfg), sort_keys=True) + "\n")
        fh.write(",".join(rows[0].keys()) + "\n")
        for r in rows:
            fh.write(",".join(f"{v:.10g}" if isinstance(v, float) else str(v) for v in r.values()) + "\n")
    return {"mean_entropy": util.mean_entropy, "bound": model.cfg.bound, "out": str(out)}


def cmd_sample(args, cfg):
    model = pl.inference_copy(FlowModel.load(args.checkpoint))
    p = _state_from_json(args.state, model.layout)
    m = _state_from_json(args.command, model.layout)
    traj = generate_trajectory(model, p, m, pl.sampler_config(cfg), np.random.default_rng(cfg["seed"]))
    doc = traj.to_dict() | {"provenance": config_mod.provenance(cfg)}
    if args.out:
        _json_dump(doc, args.out)
        return {"out": str(args.out)}
    return doc


def cmd_rollout(args, cfg):
    model = pl.inference_copy(FlowModel.load(args.checkpoint))
    clip = load_clip(args.clip)
    dist = Disturbance.load(args.disturb) if args.disturb else None
    proto = pl.eval_protocol(cfg)
    height = proto.robot_height or chain_height(default_chain(), clip.layout)
    hcfg = HarnessConfig.scaled(height, n_exec=proto.n_exec, command_lookahead=proto.command_lookahead)
    res = run_episode(ModelGenerator(model, pl.sampler_config(cfg)), pl.tracker(cfg), clip, dist, hcfg,
                      np.random.default_rng(cfg["seed"]))
    metrics = {k: v for k, v in vars(res.metrics).items()}
    if args.trace:
        Path(args.trace).parent.mkdir(parents=True, exist_ok=True)
        with open(args.trace, "w") as fh:
            fh.write(json.dumps({"provenance": config_mod.provenance(cfg)}, sort_keys=True) + "\n")
            for rec in res.trace:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.write(json.dumps({"summary": metrics}, sort_keys=True) + "\n")
    return metrics


def cmd_eval(args, cfg):
    model = pl.inference_copy(FlowModel.load(args.checkpoint))
    if args.protocol:
        cfg = config_mod.merge(cfg, {"eval": config_mod.load_file(args.protocol)}, "")
    proto = pl.eval_protocol(cfg, seed=cfg["seed"])
    corpus = load_corpus(args.corpus)
    if not corpus:
        raise ValueError(f"no clips found in {args.corpus}")
    sampler = pl.sampler_config(cfg)
    rows = evaluate_suite(lambda clip: ModelGenerator(model, sampler), corpus, proto, pl.tracker(cfg), args.jobs)
    height = proto.robot_height or chain_height(default_chain(), corpus[0].layout)
    hcfg = HarnessConfig.scaled(height)
    scale = {"robot_height": height, "height_threshold": hcfg.height_threshold, "ori_threshold": hcfg.ori_threshold}
    write_results(rows, args.out, config_mod.provenance(cfg) | {"thresholds": scale})
    return summarize(rows)


def cmd_report(args, cfg):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {"provenance": config_mod.provenance(cfg)}
    if args.eval:
        payload = json.loads((Path(args.eval) / "metrics.json").read_text())
        rows = payload["rows"]
        groups: dict = {}
        for r in rows:
            groups.setdefault((r["category"], r["variant"]), []).append(r)
        table = [{"category": c, "variant": v, **summarize(rs)} for (c, v), rs in sorted(groups.items())]
        with open(out / "report.csv", "w") as fh:
            keys = list(table[0].keys())
            fh.write(",".join(keys) + "\n")
            for t in table:
                fh.write(",".join(f"{t[k]:.10g}" if isinstance(t[k], float) else str(t[k]) for k in keys) + "\n")
        summary["eval"] = {"overall": summarize(rows), "groups": table}
    if args.curriculum:
        doc = json.loads(Path(args.curriculum).read_text())
        state = BinState(**{**cfg["curriculum"], **doc})
        dump_csv(state, out / "curriculum.csv")
        summary["curriculum"] = {"bins": state.B, "episodes": state.episodes}
    _json_dump(summary, out / "summary.json")
    return {"out": str(out)}


def cmd_selftest(args, cfg):
    from .acceptance import run_all

    results = run_all(cfg, jobs=args.jobs, out_dir=args.out)
    passed = all(r.passed for r in results)
    return {"passed": passed, "criteria": [r.line() for r in results]}, (0 if passed else 1)


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML or JSON file with configuration overrides")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key, e.g. train.steps=500 (repeatable)")
    common.add_argument("--seed", type=int, help="root seed for every random draw")
    common.add_argument("--jobs", type=int, default=1, help="parallel workers; never changes results")
    common.add_argument("--log-level", default="WARNING")

    parser = _Parser(prog="flowmid", description="State-conditioned keyframe trajectory generator: "
                     "data, training, sampling and closed-loop evaluation.")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}", parser_class=_Parser)

    def add(name, fn, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(fn=fn)
        return p

    p = add("gen-corpus", cmd_gen_corpus, "write a synthetic motion corpus as clip JSON files")
    p.add_argument("--spec", help="corpus spec JSON (default: built-in families)")
    p.add_argument("--out", required=True)

    p = add("build-dataset", cmd_build_dataset, "build training tuples from a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, "train the flow model on a dataset file")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)

    p = add("train-tokenizer", cmd_train_tokenizer, "train the motion tokenizer on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)

    p = add("tokenize", cmd_tokenize, "encode a clip into token index vectors")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clip", required=True)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--out")

    p = add("codebook-report", cmd_codebook_report, "per-channel code histograms and entropy as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)

    p = add("sample", cmd_sample, "generate one keyframe trajectory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--state", required=True, help="JSON state (inline or file)")
    p.add_argument("--command", required=True, help="JSON command state (inline or file)")
    p.add_argument("--out")

    p = add("rollout", cmd_rollout, "closed-loop episode on one clip")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clip", required=True)
    p.add_argument("--disturb", help="disturbance schedule JSON")
    p.add_argument("--trace", help="JSON-lines trace output")

    p = add("eval", cmd_eval, "evaluate a checkpoint on a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--protocol", help="evaluation protocol file (keys of the eval section)")
    p.add_argument("--out", required=True)

    p = add("report", cmd_report, "summaries of eval results and curriculum state")
    p.add_argument("--eval", help="directory written by eval")
    p.add_argument("--curriculum", help="curriculum state JSON (B, F, ...)")
    p.add_argument("--out", required=True)

    p = add("selftest", cmd_selftest, "run the acceptance suite")
    p.add_argument("--out", default="selftest_out")
    return parser


def _fail(kind: str, message: str, code: int, **extra) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True) + "\n")
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail("usage", str(exc), 2)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if not getattr(args, "fn", None):
        parser.print_help()
        return 2
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        flags = config_mod.parse_assignments(args.set)
        if args.seed is not None:
            flags["seed"] = args.seed
        cfg = config_mod.resolve(args.config, flags)
    except config_mod.ConfigError as exc:
        return _fail("config", str(exc), 2, key=exc.key)
    try:
        out = args.fn(args, cfg)
    except config_mod.ConfigError as exc:
        return _fail("config", str(exc), 2, key=exc.key)
    except (OSError, ValueError, KeyError, IndexError, RuntimeError) as exc:
        return _fail(type(exc).__name__, str(exc), 1)
    code = 0
    if isinstance(out, tuple):
        out, code = out
    sys.stdout.write(json.dumps(out, sort_keys=True, default=str) + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
