"""Model configuration and the in-memory checkpoint value.

A checkpoint is a named map of float32 arrays plus the configuration that
implies those names, and training metadata (step count, cumulative FLOPs,
growth history). The canonical parameter-name order defined here also
fixes the RNG consumption order of model initialization.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, FormatError

Array = np.ndarray

NORM_PLACEMENTS = ("pre", "post")
ROUTER_SCORES = ("sigmoid",)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters of the toy MoE decoder."""

    n_layers: int
    d_model: int
    n_heads: int
    n_kv_groups: int
    vocab: int
    n_experts: int
    top_k: int
    d_expert: int
    norm_placement: str = "pre"
    router_score: str = "sigmoid"
    router_bias: bool = False
    gate_normalize: bool = True
    rope_base: float = 10000.0
    init_std: float = 0.02
    aux_loss_coeff: float = 0.01
    aux_global_batch: bool = False

    def __post_init__(self):
        if self.n_layers < 1 or self.d_model < 1 or self.vocab < 2:
            raise ArgumentError("n_layers, d_model and vocab must be positive (vocab >= 2)")
        if self.n_heads < 1 or self.n_kv_groups < 1 or self.n_heads % self.n_kv_groups != 0:
            raise ArgumentError("n_heads must be a positive multiple of n_kv_groups")
        if self.d_model % self.n_heads != 0:
            raise ArgumentError("d_model must be divisible by n_heads")
        if (self.d_model // self.n_heads) % 2 != 0:
            raise ArgumentError("head dimension must be even for rotary embeddings")
        if not (1 <= self.top_k <= self.n_experts):
            raise ArgumentError(f"top_k={self.top_k} outside [1, {self.n_experts}]")
        if self.d_expert < 1:
            raise ArgumentError("d_expert must be positive")
        if self.norm_placement not in NORM_PLACEMENTS:
            raise ArgumentError(f"norm_placement must be one of {NORM_PLACEMENTS}")
        if self.router_score not in ROUTER_SCORES:
            raise ArgumentError(f"router_score must be one of {ROUTER_SCORES}")
        if self.init_std <= 0:
            raise ArgumentError("init_std must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise FormatError(f"unknown model config keys: {sorted(unknown)}")
        missing = {f.name for f in dataclasses.fields(cls)
                   if f.default is dataclasses.MISSING} - set(d)
        if missing:
            raise FormatError(f"missing model config keys: {sorted(missing)}")
        return cls(**d)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical (name -> shape) map, in initialization order."""
    d, de = cfg.d_model, cfg.d_expert
    kv_dim = cfg.n_kv_groups * cfg.head_dim
    shapes: dict[str, tuple[int, ...]] = {"embed.weight": (cfg.vocab, d)}
    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        shapes[f"{p}.attn_norm.gain"] = (d,)
        shapes[f"{p}.attn.wq"] = (d, d)
        shapes[f"{p}.attn.wk"] = (d, kv_dim)
        shapes[f"{p}.attn.wv"] = (d, kv_dim)
        shapes[f"{p}.attn.wo"] = (d, d)
        shapes[f"{p}.moe_norm.gain"] = (d,)
        shapes[f"{p}.router.weight"] = (cfg.n_experts, d)
        if cfg.router_bias:
            shapes[f"{p}.router.bias"] = (cfg.n_experts,)
        for e in range(cfg.n_experts):
            shapes[f"{p}.experts.{e}.up"] = (d, de)
            shapes[f"{p}.experts.{e}.down"] = (de, d)
    if cfg.norm_placement == "pre":
        shapes["final_norm.gain"] = (d,)
    shapes["head.weight"] = (d, cfg.vocab)
    return shapes


def layer_param_names(cfg: ModelConfig, layer: int) -> list[str]:
    prefix = f"layers.{layer}."
    return [n for n in param_shapes(cfg) if n.startswith(prefix)]


@dataclass
class Checkpoint:
    """Named tensor map, its configuration, and training metadata."""

    config: ModelConfig
    params: dict[str, Array]
    step: int = 0
    flops: int = 0
    growth_history: list[dict] = field(default_factory=list)

    def copy(self) -> "Checkpoint":
        return Checkpoint(
            config=self.config,
            params={k: v.copy() for k, v in self.params.items()},
            step=self.step,
            flops=self.flops,
            growth_history=[dict(ev) for ev in self.growth_history],
        )

    def validate(self) -> None:
        expected = param_shapes(self.config)
        if set(expected) != set(self.params):
            extra = sorted(set(self.params) - set(expected))
            missing = sorted(set(expected) - set(self.params))
            raise ArgumentError(f"parameter names mismatch: extra={extra} missing={missing}")
        for name, shape in expected.items():
            arr = self.params[name]
            if tuple(arr.shape) != shape:
                raise ArgumentError(f"{name} has shape {arr.shape}, expected {shape}")
            if arr.dtype != np.float32:
                raise ArgumentError(f"{name} must be float32, got {arr.dtype}")


def params_equal(a: dict[str, Array], b: dict[str, Array]) -> bool:
    """Bit-exact equality of two parameter maps."""
    if set(a) != set(b):
        return False
    return all(np.array_equal(a[k], b[k]) for k in a)
