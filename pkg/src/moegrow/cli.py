"""Command-line entry point.

Subcommands: train, grow-depth, grow-width, inspect-norms, diff, eval,
sweep. A JSON run config (model + schedule + corpus + seed, optionally a
growth section for sweeps) drives the training commands; all randomness
comes from the config seed or explicit --seed flags, never from the
environment. Runtime failures exit 1 with a single "error: ..." line on
stderr; bad flags exit 2.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

import numpy as np

from . import store
from .analysis import (SweepReport, emit_report, fp_deviation, norm_profile,
                       profile_to_csv, random_probes, sunk_cost_sweep)
from .checkpoint import ModelConfig
from .corpus import CorpusSpec, gen_corpus
from .errors import ArgumentError, MoeGrowError
from .growth import DepthPlan, WidthPlan, grow_depth, grow_width
from .model import init_model
from .training import TrainSchedule, evaluate, train_run

HELDOUT_SEED_OFFSET = 1


@dataclasses.dataclass
class RunConfig:
    model: ModelConfig
    schedule: TrainSchedule
    corpus: CorpusSpec
    seed: int
    growth: dict | None = None


def _build_strict(cls, section: dict, name: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ArgumentError(f"unknown keys in {name!r} section: {sorted(unknown)}")
    missing = {f.name for f in dataclasses.fields(cls)
               if f.default is dataclasses.MISSING} - set(section)
    if missing:
        raise ArgumentError(f"missing keys in {name!r} section: {sorted(missing)}")
    return cls(**section)


def load_run_config(path) -> RunConfig:
    with open(path) as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ArgumentError("run config must be a JSON object")
    allowed = {"model", "schedule", "corpus", "seed", "growth"}
    unknown = set(raw) - allowed
    if unknown:
        raise ArgumentError(f"unknown top-level config keys: {sorted(unknown)}")
    for key in ("model", "schedule", "corpus", "seed"):
        if key not in raw:
            raise ArgumentError(f"config missing required key {key!r}")
    if not isinstance(raw["seed"], int):
        raise ArgumentError("seed must be an integer")
    return RunConfig(
        model=_build_strict(ModelConfig, raw["model"], "model"),
        schedule=_build_strict(TrainSchedule, raw["schedule"], "schedule"),
        corpus=_build_strict(CorpusSpec, raw["corpus"], "corpus"),
        seed=raw["seed"],
        growth=raw.get("growth"),
    )


def _growth_plan(cfg: RunConfig, seed: int):
    """Growth plan for sweeps; defaults to interposition depth doubling."""
    section = cfg.growth or {"kind": "depth", "method": "interposition", "factor": 2}
    kind = section.get("kind")
    if kind == "depth":
        allowed = {"kind", "method", "factor", "repeats"}
        unknown = set(section) - allowed
        if unknown:
            raise ArgumentError(f"unknown growth keys: {sorted(unknown)}")
        repeats = section.get("repeats")
        return DepthPlan(method=section.get("method", "interposition"),
                         repeats=tuple(repeats) if repeats is not None else None,
                         factor=section.get("factor"))
    if kind == "width":
        allowed = {"kind", "factor", "alpha"}
        unknown = set(section) - allowed
        if unknown:
            raise ArgumentError(f"unknown growth keys: {sorted(unknown)}")
        return WidthPlan(expert_factor=section.get("factor", 2),
                         alpha=section.get("alpha", 0.01), seed=seed)
    raise ArgumentError("growth.kind must be 'depth' or 'width'")


def _parse_int_list(text: str, flag: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x != ""]
    except ValueError as exc:
        raise ArgumentError(f"{flag} expects a comma-separated integer list") from exc


def _cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    stream = gen_corpus(cfg.corpus, seed=cfg.seed)
    ckpt = store.load(args.resume) if args.resume else init_model(cfg.model, seed=cfg.seed)
    kwargs = {"steps": args.steps} if args.steps is not None else {"flops_budget": args.flops}
    trained, log = train_run(ckpt, stream, cfg.schedule, seed=cfg.seed, **kwargs)
    store.save(trained, args.out)
    if args.log:
        log.to_csv(args.log)
    print(f"saved checkpoint to {args.out} "
          f"(step={trained.step}, flops={trained.flops})")
    return 0


def _cmd_grow_depth(args) -> int:
    ckpt = store.load(args.infile)
    if args.repeats is not None:
        plan = DepthPlan(method=args.method,
                         repeats=tuple(_parse_int_list(args.repeats, "--repeats")))
    else:
        plan = DepthPlan(method=args.method, factor=args.factor)
    grown = grow_depth(ckpt, plan)
    store.save(grown, args.out)
    print(f"grew depth {ckpt.config.n_layers} -> {grown.config.n_layers} layers")
    return 0


def _cmd_grow_width(args) -> int:
    ckpt = store.load(args.infile)
    plan = WidthPlan(expert_factor=args.factor, alpha=args.alpha, seed=args.seed)
    grown = grow_width(ckpt, plan)
    store.save(grown, args.out)
    print(f"grew width {ckpt.config.n_experts} -> {grown.config.n_experts} experts "
          f"(top_k {ckpt.config.top_k} -> {grown.config.top_k})")
    return 0


def _cmd_inspect_norms(args) -> int:
    ckpt = store.load(args.infile)
    profile_to_csv(norm_profile(ckpt), args.out)
    print(f"wrote {ckpt.config.n_layers}-layer norm profile to {args.out}")
    return 0


def _cmd_diff(args) -> int:
    base = store.load(args.base)
    grown = store.load(args.grown)
    probes = random_probes(base.config.vocab, args.probes, args.seq_len, args.seed)
    dev = fp_deviation(base, grown, probes)
    print(f"max_rel={dev.max_rel!r} mean_abs={dev.mean_abs!r} "
          f"loss_delta={dev.loss_delta!r}")
    return 0


def _cmd_eval(args) -> int:
    cfg = load_run_config(args.config)
    ckpt = store.load(args.infile)
    heldout = gen_corpus(cfg.corpus, seed=cfg.seed + HELDOUT_SEED_OFFSET)
    loss = evaluate(ckpt, heldout, cfg.schedule.batch_size, cfg.schedule.seq_len)
    print(f"heldout_loss={loss!r}")
    return 0


def _cmd_sweep(args) -> int:
    cfg = load_run_config(args.config)
    starts = _parse_int_list(args.starts, "--starts")
    if not starts:
        raise ArgumentError("--starts must name at least one step")
    if any(s < 0 for s in starts):
        raise ArgumentError("start steps must be non-negative")
    mode = args.mode.replace("-", "_")
    plan = _growth_plan(cfg, seed=cfg.seed)

    stream = gen_corpus(cfg.corpus, seed=cfg.seed)
    heldout = gen_corpus(cfg.corpus, seed=cfg.seed + HELDOUT_SEED_OFFSET)
    base = init_model(cfg.model, seed=cfg.seed)
    snapshots: dict[int, None] = {s: None for s in starts}
    _, _ = train_run(base, stream, cfg.schedule, steps=max(starts), seed=cfg.seed,
                     snapshot_into=snapshots)
    report = sunk_cost_sweep(snapshots, starts, plan, mode, args.budget,
                             cfg.schedule, stream, heldout, base_seed=cfg.seed,
                             jobs=args.jobs)
    fmt = "json" if str(args.out).endswith(".json") else "csv"
    emit_report(report, args.out, fmt)
    print(f"wrote {len(report.rows)}-row {mode} sweep report to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moegrow",
                                     description="Grow and train toy MoE checkpoints")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None)
    p.add_argument("--log", default=None, help="optional training-log CSV path")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--steps", type=int)
    group.add_argument("--flops", type=int)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("grow-depth", help="duplicate layers of a checkpoint")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=["interposition", "stack"], required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--factor", type=int)
    group.add_argument("--repeats")
    p.set_defaults(func=_cmd_grow_depth)

    p = sub.add_parser("grow-width", help="duplicate experts of a checkpoint")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--factor", type=int, required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=_cmd_grow_width)

    p = sub.add_parser("inspect-norms", help="dump the per-layer norm profile")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_inspect_norms)

    p = sub.add_parser("diff", help="compare two checkpoints on random probes")
    p.add_argument("--base", required=True)
    p.add_argument("--grown", required=True)
    p.add_argument("--probes", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--seq-len", type=int, default=64)
    p.set_defaults(func=_cmd_diff)

    p = sub.add_parser("eval", help="held-out loss of a checkpoint")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep", help="growth-timing sweep over saved start steps")
    p.add_argument("--config", required=True)
    p.add_argument("--starts", required=True)
    p.add_argument("--mode", choices=["fixed-extra", "fixed-total"], required=True)
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=_cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MoeGrowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
