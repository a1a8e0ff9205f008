"""Checkpoint growth operators: depth by layer duplication, width by
expert duplication with scaled noise.

Both operators are pure functions of (checkpoint, plan): tensors are
copied bit-exactly, the input checkpoint is never touched, and the
cumulative-FLOPs metadata carries over verbatim so sunk cost stays
attributable after growth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint, ModelConfig, layer_param_names
from .errors import ArgumentError
from .tensor import Tensor

Array = np.ndarray

DEPTH_METHODS = ("interposition", "stack")


@dataclass(frozen=True)
class DepthPlan:
    """Layer-duplication plan.

    interposition repeats each layer in place ([a, a, b, b] for factor 2),
    driven by an explicit per-layer repeat vector or a uniform factor;
    stack tiles the whole layer sequence ([a, b, a, b]).
    """

    method: str
    repeats: tuple[int, ...] | None = None
    factor: int | None = None

    def __post_init__(self):
        if self.method not in DEPTH_METHODS:
            raise ArgumentError(f"method must be one of {DEPTH_METHODS}")
        if self.method == "stack":
            if self.repeats is not None:
                raise ArgumentError("stack takes a global factor, not per-layer repeats")
            if self.factor is None or self.factor < 1:
                raise ArgumentError("stack needs factor >= 1")
        else:
            if (self.repeats is None) == (self.factor is None):
                raise ArgumentError("interposition needs exactly one of repeats or factor")
            if self.factor is not None and self.factor < 1:
                raise ArgumentError("factor must be >= 1")
            if self.repeats is not None:
                if len(self.repeats) == 0 or any(r < 1 for r in self.repeats):
                    raise ArgumentError("repeats must all be >= 1")

    def layer_order(self, n_layers: int) -> list[int]:
        """Source-layer index for every output layer position."""
        if self.method == "stack":
            return list(range(n_layers)) * self.factor
        repeats = self.repeats
        if repeats is None:
            repeats = (self.factor,) * n_layers
        if len(repeats) != n_layers:
            raise ArgumentError(
                f"repeats has length {len(repeats)}, model has {n_layers} layers")
        return [i for i, r in enumerate(repeats) for _ in range(r)]


def repeats_for_target(n_layers: int, target: int) -> tuple[int, ...]:
    """Per-layer repeat vector reaching a target depth by interposition.

    Uniform multiples duplicate every layer equally; a target of
    2n - 2 leaves the first and last layers unduplicated.
    """
    if target == 2 * n_layers - 2 and n_layers >= 2:
        return (1,) + (2,) * (n_layers - 2) + (1,)
    if target >= n_layers and target % n_layers == 0:
        return (target // n_layers,) * n_layers
    raise ArgumentError(
        f"no repeat convention for {n_layers} -> {target} layers; "
        "pass an explicit repeat vector")


@dataclass(frozen=True)
class WidthPlan:
    """Expert-duplication plan: factor-fold experts and active k, with
    Gaussian noise of std alpha * std(source tensor) on the copies."""

    expert_factor: int
    alpha: float
    seed: int

    def __post_init__(self):
        if self.expert_factor < 1:
            raise ArgumentError("expert_factor must be >= 1")
        if self.alpha < 0:
            raise ArgumentError("alpha must be non-negative")


def _noisy(arr: Array, alpha: float, rng: np.random.Generator) -> Array:
    sigma = alpha * float(np.std(arr, dtype=np.float64))
    if sigma == 0.0:
        return arr.copy()
    noise = rng.standard_normal(arr.shape, dtype=np.float32) * np.float32(sigma)
    return arr + noise


def inject_noise(t: Tensor, alpha: float, rng: np.random.Generator) -> Tensor:
    """t plus elementwise Normal(0, (alpha * std(t))^2) noise.

    std(t) is the population standard deviation of the entries; a constant
    tensor (or alpha 0) comes back bit-identical.
    """
    if alpha < 0:
        raise ArgumentError("alpha must be non-negative")
    return Tensor(_noisy(t.data, alpha, rng))


def grow_depth(ckpt: Checkpoint, plan: DepthPlan) -> Checkpoint:
    """New checkpoint with the plan's layer arrangement; everything else
    (embeddings, norms, head, metadata) is copied once."""
    cfg = ckpt.config
    order = plan.layer_order(cfg.n_layers)
    new_cfg = cfg.replace(n_layers=len(order))

    layer_names = {i: layer_param_names(cfg, i) for i in range(cfg.n_layers)}
    params: dict[str, Array] = {}
    for name, arr in ckpt.params.items():
        if not name.startswith("layers."):
            params[name] = arr.copy()
    for new_i, src_i in enumerate(order):
        src_prefix = f"layers.{src_i}."
        dst_prefix = f"layers.{new_i}."
        for name in layer_names[src_i]:
            params[dst_prefix + name[len(src_prefix):]] = ckpt.params[name].copy()

    event = {
        "kind": "depth",
        "method": plan.method,
        "layer_order": order,
        "base_step": ckpt.step,
        "base_flops": ckpt.flops,
    }
    return Checkpoint(config=new_cfg, params=params, step=ckpt.step,
                      flops=ckpt.flops,
                      growth_history=[dict(ev) for ev in ckpt.growth_history] + [event])


def grow_width(ckpt: Checkpoint, plan: WidthPlan) -> Checkpoint:
    """New checkpoint with factor-fold experts per layer.

    Block 0 of the new expert list (and of the router rows/bias) is the
    bit-exact original; blocks 1..factor-1 are noisy copies. The RNG is
    consumed layer by layer, block by block, expert by expert (up then
    down), then the router weight block, then the bias block.
    """
    cfg = ckpt.config
    f = plan.expert_factor
    new_cfg = cfg.replace(n_experts=f * cfg.n_experts, top_k=f * cfg.top_k)
    rng = np.random.Generator(np.random.PCG64(plan.seed))

    params: dict[str, Array] = {}
    for name, arr in ckpt.params.items():
        if ".experts." not in name and ".router." not in name:
            params[name] = arr.copy()

    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        for e in range(cfg.n_experts):
            params[f"{p}.experts.{e}.up"] = ckpt.params[f"{p}.experts.{e}.up"].copy()
            params[f"{p}.experts.{e}.down"] = ckpt.params[f"{p}.experts.{e}.down"].copy()
        for b in range(1, f):
            for e in range(cfg.n_experts):
                new_e = b * cfg.n_experts + e
                params[f"{p}.experts.{new_e}.up"] = _noisy(
                    ckpt.params[f"{p}.experts.{e}.up"], plan.alpha, rng)
                params[f"{p}.experts.{new_e}.down"] = _noisy(
                    ckpt.params[f"{p}.experts.{e}.down"], plan.alpha, rng)
        router = ckpt.params[f"{p}.router.weight"]
        blocks = [router.copy()]
        blocks += [_noisy(router, plan.alpha, rng) for _ in range(1, f)]
        params[f"{p}.router.weight"] = np.concatenate(blocks, axis=0)
        if cfg.router_bias:
            bias = ckpt.params[f"{p}.router.bias"]
            bias_blocks = [bias.copy()]
            bias_blocks += [_noisy(bias, plan.alpha, rng) for _ in range(1, f)]
            params[f"{p}.router.bias"] = np.concatenate(bias_blocks, axis=0)

    event = {
        "kind": "width",
        "factor": f,
        "alpha": plan.alpha,
        "seed": plan.seed,
        "base_step": ckpt.step,
        "base_flops": ckpt.flops,
    }
    return Checkpoint(config=new_cfg, params=params, step=ckpt.step,
                      flops=ckpt.flops,
                      growth_history=[dict(ev) for ev in ckpt.growth_history] + [event])


def grown_config(cfg: ModelConfig, plan) -> ModelConfig:
    """Configuration a plan would produce, without touching tensors."""
    if isinstance(plan, DepthPlan):
        return cfg.replace(n_layers=len(plan.layer_order(cfg.n_layers)))
    if isinstance(plan, WidthPlan):
        return cfg.replace(n_experts=plan.expert_factor * cfg.n_experts,
                           top_k=plan.expert_factor * cfg.top_k)
    raise ArgumentError(f"unknown growth plan type {type(plan).__name__}")
