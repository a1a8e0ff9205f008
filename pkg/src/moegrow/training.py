"""AdamW training loop, LR schedule, balance loss, and FLOPs accounting.

The FLOPs ledger lives on the checkpoint and advances by
6 * active-parameters * tokens per optimizer step; growth changes the
per-step increment but never the accumulated total, so "sunk + additional"
decompositions stay exact across growth events.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, ModelConfig, param_shapes
from .corpus import batch_iter
from .errors import ArgumentError, NumericsError, TrainingError
from .model import RoutingResult, forward_tokens, leaf_tensors
from .tensor import GradTape, Tensor

Array = np.ndarray

GRAD_CLIP_NORM = 1.0


@dataclass(frozen=True)
class TrainSchedule:
    max_lr: float
    warmup_steps: int
    constant_steps: int
    anneal_steps: int
    batch_size: int
    seq_len: int
    min_lr_ratio: float = 0.1

    def __post_init__(self):
        if self.max_lr <= 0:
            raise ArgumentError("max_lr must be positive")
        if min(self.warmup_steps, self.constant_steps, self.anneal_steps) < 0:
            raise ArgumentError("step counts must be non-negative")
        if not (0 < self.min_lr_ratio <= 1):
            raise ArgumentError("min_lr_ratio must be in (0, 1]")
        if self.batch_size < 1 or self.seq_len < 1:
            raise ArgumentError("batch_size and seq_len must be positive")


def lr_at(schedule: TrainSchedule, step: int) -> float:
    """Piecewise-linear learning rate: warmup, constant, anneal, floor."""
    if step < 0:
        raise ArgumentError("step must be non-negative")
    w, c, a = schedule.warmup_steps, schedule.constant_steps, schedule.anneal_steps
    max_lr = schedule.max_lr
    min_lr = schedule.min_lr_ratio * max_lr
    if step < w:
        return max_lr * step / w
    if step <= w + c or a == 0:
        return max_lr
    if step < w + c + a:
        frac = (step - w - c) / a
        return max_lr - (max_lr - min_lr) * frac
    return min_lr


@dataclass
class OptimizerState:
    """AdamW first/second moments plus the shared step counter."""

    m: dict[str, Array]
    v: dict[str, Array]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.1
    eps: float = 1e-8

    @classmethod
    def init(cls, params: dict[str, Array], **hyper) -> "OptimizerState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()},
                   **hyper)


def adamw_step(params: dict[str, Array], grads: dict[str, Array],
               state: OptimizerState, lr: float) -> dict[str, Array]:
    """One decoupled-weight-decay AdamW update with bias correction.

    Returns a fresh parameter map; moments in `state` are updated in place.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for {name} at step {state.step}",
                                step=state.step)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    out = {}
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        update = m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * p
        out[name] = (p - lr * update).astype(np.float32, copy=False)
    return out


def aux_loss(routings: list[RoutingResult], coeff: float) -> Tensor:
    """Load-balance penalty: E * sum_i fraction_i * mean_score_i per layer,
    averaged over sequences and layers, scaled by coeff."""
    total = None
    for routing in routings:
        n_experts = routing.fractions.shape[-1]
        per_seq = T.reduce_sum(T.mul(routing.mean_scores, routing.fractions), axis=-1)
        layer_term = T.mul(T.reduce_mean(per_seq), float(n_experts))
        total = layer_term if total is None else T.add(total, layer_term)
    if total is None:
        return Tensor(np.float32(0.0))
    return T.mul(total, coeff / len(routings))


def param_counts(cfg: ModelConfig) -> tuple[int, int]:
    """(total, active) learnable parameter counts.

    Active counts every non-expert tensor plus top_k experts per layer.
    """
    shapes = param_shapes(cfg)
    expert_per = 2 * cfg.d_model * cfg.d_expert
    total = sum(int(np.prod(s)) for s in shapes.values())
    active = total - cfg.n_layers * cfg.n_experts * expert_per \
        + cfg.n_layers * cfg.top_k * expert_per
    return total, active


def flops_per_token(cfg: ModelConfig) -> int:
    """Training FLOPs per token: 6 * active parameters."""
    _, active = param_counts(cfg)
    return 6 * active


@dataclass
class LogRow:
    step: int
    flops: int
    loss: float
    lr: float
    max_load: float


@dataclass
class TrainLog:
    rows: list[LogRow] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "flops", "loss", "lr", "max_load"])
            for r in self.rows:
                writer.writerow([r.step, r.flops, repr(r.loss), repr(r.lr),
                                 repr(r.max_load)])

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.rows]


def _batches(stream: Array, schedule: TrainSchedule, seed: int):
    """Endless reproducible batch stream; window order reshuffles per pass."""
    epoch = 0
    while True:
        epoch_seed = np.random.SeedSequence([seed, epoch]).generate_state(1)[0]
        yield from batch_iter(stream, schedule.batch_size, schedule.seq_len,
                              seed=int(epoch_seed))
        epoch += 1


def train_run(ckpt: Checkpoint, stream: Array, schedule: TrainSchedule, *,
              steps: int | None = None, flops_budget: int | None = None,
              seed: int, log_every: int = 1,
              snapshot_into: dict | None = None,
              optimizer: OptimizerState | None = None
              ) -> tuple[Checkpoint, TrainLog]:
    """Train a copy of `ckpt` on `stream` until the stopping criterion.

    Exactly one of steps / flops_budget must be given; a FLOPs budget stops
    at the first step where the checkpoint ledger reaches it. The schedule
    is applied to local step numbers within this run. When `snapshot_into`
    is provided, a deep copy of the checkpoint is stored under each step
    count listed in its keys (pre-populate keys with None).
    """
    if (steps is None) == (flops_budget is None):
        raise ArgumentError("give exactly one of steps or flops_budget")
    if steps is not None and steps < 0:
        raise ArgumentError("steps must be non-negative")

    ckpt = ckpt.copy()
    cfg = ckpt.config
    fpt = flops_per_token(cfg)
    tokens_per_step = schedule.batch_size * schedule.seq_len
    state = optimizer if optimizer is not None else OptimizerState.init(ckpt.params)
    log = TrainLog()
    batches = _batches(stream, schedule, seed)

    local_step = 0
    while True:
        if snapshot_into is not None and local_step in snapshot_into:
            snapshot_into[local_step] = ckpt.copy()
        if steps is not None and local_step >= steps:
            break
        if flops_budget is not None and ckpt.flops >= flops_budget:
            break
        inputs, targets = next(batches)
        lr = lr_at(schedule, local_step)
        tensors = leaf_tensors(ckpt.params, requires_grad=True)
        try:
            with GradTape() as tape:
                logits, routings = forward_tokens(tensors, cfg, inputs)
                ce = T.cross_entropy(logits, targets.ravel())
                loss = T.add(ce, aux_loss(routings, cfg.aux_loss_coeff))
            tape.backward(loss)
        except NumericsError as exc:
            raise TrainingError(f"non-finite loss at step {local_step}: {exc}",
                                step=local_step, checkpoint=ckpt) from exc

        grads = {name: (t.grad if t.grad is not None else np.zeros_like(t.data))
                 for name, t in tensors.items()}
        gnorm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum())
                                  for g in grads.values())))
        if gnorm > GRAD_CLIP_NORM:
            scale = np.float32(GRAD_CLIP_NORM / gnorm)
            grads = {k: g * scale for k, g in grads.items()}

        ckpt.params = adamw_step(ckpt.params, grads, state, lr)
        ckpt.step += 1
        ckpt.flops += fpt * tokens_per_step
        local_step += 1

        if local_step % log_every == 0:
            max_load = max(float(r.fractions.max()) for r in routings)
            log.rows.append(LogRow(step=ckpt.step, flops=ckpt.flops,
                                   loss=loss.item(), lr=lr, max_load=max_load))
    return ckpt, log


def evaluate(ckpt: Checkpoint, stream: Array, batch_size: int, seq_len: int) -> float:
    """Mean next-token cross-entropy over the stream, in nats."""
    total = 0.0
    count = 0
    tensors = leaf_tensors(ckpt.params)
    for inputs, targets in batch_iter(stream, batch_size, seq_len):
        logits, _ = forward_tokens(tensors, ckpt.config, inputs)
        ce = T.cross_entropy(logits, targets.ravel())
        n = targets.size
        total += ce.item() * n
        count += n
    if count == 0:
        raise ArgumentError("stream too short to evaluate")
    return total / count
