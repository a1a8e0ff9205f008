"""Norm profiling, output-preservation measurement, and the growth-timing
sweep harness.

A sweep trains growth legs from saved base checkpoints under either a
fixed additional-FLOPs budget or a fixed total-FLOPs budget, always adds a
from-scratch leg (a fresh initialization of the grown architecture, sunk
cost zero), and reports per-leg loss metrics as CSV or JSON rows.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, layer_param_names
from .errors import ArgumentError
from .growth import DepthPlan, grow_depth, grow_width, grown_config
from .model import forward_tokens, init_model, leaf_tensors
from .training import TrainSchedule, evaluate, train_run

Array = np.ndarray

SCRATCH_STEP = -1

REPORT_COLUMNS = ("start_step", "sunk_flops", "method", "extra_flops",
                  "final_loss", "tail_mean_loss", "heldout_loss")


def norm_profile(ckpt: Checkpoint) -> Array:
    """Per-layer mean Frobenius norm over the layer's 2-D weight tensors."""
    cfg = ckpt.config
    profile = np.empty(cfg.n_layers, dtype=np.float64)
    for i in range(cfg.n_layers):
        norms = [float(np.linalg.norm(ckpt.params[name].astype(np.float64)))
                 for name in layer_param_names(cfg, i)
                 if ckpt.params[name].ndim == 2]
        profile[i] = float(np.mean(norms))
    return profile


def profile_to_csv(profile: Array, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer_index", "norm"])
        for i, v in enumerate(profile):
            writer.writerow([i, repr(float(v))])


@dataclass(frozen=True)
class FpDeviation:
    max_rel: float
    mean_abs: float
    loss_delta: float


def _probe_logits(ckpt: Checkpoint, probes: Array) -> tuple[Array, float]:
    tensors = leaf_tensors(ckpt.params)
    logits, _ = forward_tokens(tensors, ckpt.config, probes[:, :-1])
    ce = T.cross_entropy(logits, probes[:, 1:].ravel())
    return logits.data, ce.item()


def fp_deviation(base: Checkpoint, grown: Checkpoint, probes: Array) -> FpDeviation:
    """Compare two checkpoints' outputs on identical probe sequences.

    probes is an integer array [n_probes, seq_len + 1]; the last column is
    only used as next-token targets for the loss delta.
    """
    if base.config.vocab != grown.config.vocab:
        raise ArgumentError("checkpoints use different vocabularies")
    probes = np.asarray(probes)
    if probes.ndim != 2 or probes.shape[1] < 2:
        raise ArgumentError("probes must be [n, seq_len + 1] with seq_len >= 1")
    a, loss_a = _probe_logits(base, probes)
    b, loss_b = _probe_logits(grown, probes)
    diff = np.abs(a.astype(np.float64) - b.astype(np.float64))
    denom = np.maximum(np.abs(a), np.abs(b)).astype(np.float64) + 1e-12
    return FpDeviation(
        max_rel=float((diff / denom).max()),
        mean_abs=float(diff.mean()),
        loss_delta=loss_b - loss_a,
    )


def random_probes(vocab: int, n_probes: int, seq_len: int, seed: int) -> Array:
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.integers(0, vocab, size=(n_probes, seq_len + 1), dtype=np.int64)


@dataclass
class SweepRow:
    start_step: int
    sunk_flops: int
    method: str
    extra_flops: int
    final_loss: float
    tail_mean_loss: float
    heldout_loss: float


@dataclass
class SweepReport:
    mode: str
    budget: int
    rows: list[SweepRow] = field(default_factory=list)


def _tail_mean(losses: list[float]) -> float:
    if not losses:
        return float("nan")
    tail = losses[-max(1, len(losses) // 4):]
    return float(np.mean(tail))


def _leg_seed(base_seed: int, start_step: int) -> int:
    return int(np.random.SeedSequence([base_seed, start_step + 1]).generate_state(1)[0])


def _run_leg(args) -> SweepRow:
    (start_step, ckpt, plan, mode, budget, schedule, stream,
     heldout_stream, base_seed) = args
    if start_step == SCRATCH_STEP:
        method = "scratch"
        model = init_model(grown_config(ckpt.config, plan), seed=_leg_seed(base_seed, SCRATCH_STEP))
    elif isinstance(plan, DepthPlan):
        method = plan.method
        model = grow_depth(ckpt, plan)
    else:
        method = "width"
        model = grow_width(ckpt, plan)
    sunk = model.flops
    target = budget if mode == "fixed_total" else sunk + budget
    trained, log = train_run(model, stream, schedule, flops_budget=target,
                             seed=_leg_seed(base_seed, start_step))
    heldout = evaluate(trained, heldout_stream, schedule.batch_size, schedule.seq_len)
    losses = log.losses
    return SweepRow(
        start_step=start_step,
        sunk_flops=sunk,
        method=method,
        extra_flops=trained.flops - sunk,
        final_loss=losses[-1] if losses else float("nan"),
        tail_mean_loss=_tail_mean(losses),
        heldout_loss=heldout,
    )


def sunk_cost_sweep(base_checkpoints: dict[int, Checkpoint],
                    start_steps: list[int],
                    growth_plan,
                    mode: str,
                    budget: int,
                    schedule: TrainSchedule,
                    stream: Array,
                    heldout_stream: Array,
                    base_seed: int,
                    jobs: int = 1) -> SweepReport:
    """Grow and continue training from each start checkpoint, plus a
    from-scratch leg of the grown architecture (start_step -1, sunk 0).

    fixed_extra gives every leg the same additional budget; fixed_total
    trains each leg until its ledger (sunk + additional) reaches the
    budget, which must exceed every start checkpoint's sunk cost.
    """
    if mode not in ("fixed_extra", "fixed_total"):
        raise ArgumentError("mode must be fixed_extra or fixed_total")
    missing = [s for s in start_steps if s not in base_checkpoints]
    if missing:
        raise ArgumentError(f"no saved checkpoint for start steps {missing}")
    if len(set(start_steps)) != len(start_steps):
        raise ArgumentError("start steps must be unique")
    if mode == "fixed_total":
        for s in start_steps:
            if base_checkpoints[s].flops >= budget:
                raise ArgumentError(
                    f"total budget {budget} does not exceed sunk cost of step {s}")

    any_ckpt = base_checkpoints[start_steps[0]] if start_steps else \
        next(iter(base_checkpoints.values()))
    tasks = [(SCRATCH_STEP, any_ckpt, growth_plan, mode, budget, schedule,
              stream, heldout_stream, base_seed)]
    for s in sorted(start_steps):
        tasks.append((s, base_checkpoints[s], growth_plan, mode, budget,
                      schedule, stream, heldout_stream, base_seed))

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_leg, tasks))
    else:
        rows = [_run_leg(t) for t in tasks]
    rows.sort(key=lambda r: r.start_step)
    return SweepReport(mode=mode, budget=budget, rows=rows)


def emit_report(report: SweepReport, path, fmt: str = "csv") -> None:
    """Write the report rows with the stable column order."""
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(REPORT_COLUMNS)
            for r in report.rows:
                writer.writerow([r.start_step, r.sunk_flops, r.method,
                                 r.extra_flops, repr(r.final_loss),
                                 repr(r.tail_mean_loss), repr(r.heldout_loss)])
    elif fmt == "json":
        payload = [dict(zip(REPORT_COLUMNS, (r.start_step, r.sunk_flops, r.method,
                                             r.extra_flops, r.final_loss,
                                             r.tail_mean_loss, r.heldout_loss)))
                   for r in report.rows]
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")
    else:
        raise ArgumentError(f"unknown report format {fmt!r}")


def parse_report_csv(path) -> list[SweepRow]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != REPORT_COLUMNS:
            raise ArgumentError(f"unexpected report header {header}")
        for rec in reader:
            rows.append(SweepRow(
                start_step=int(rec[0]), sunk_flops=int(rec[1]), method=rec[2],
                extra_flops=int(rec[3]), final_loss=float(rec[4]),
                tail_mean_loss=float(rec[5]), heldout_loss=float(rec[6])))
    return rows
