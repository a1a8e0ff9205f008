"""Decoder-only MoE transformer used as the growth testbed.

Each block is grouped-query attention followed by a top-k mixture of
experts, wired with either pre-norm residuals (norm before the residual
add, final norm at the top) or post-norm residuals (norm after the add).
Router scores are sigmoids of a linear map; selected gates are optionally
renormalized to sum to one, which is what makes expert duplication exactly
output-preserving.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, ModelConfig, param_shapes
from .errors import ArgumentError
from .tensor import Tensor

Array = np.ndarray

RMS_EPS = 1e-6
MASK_VALUE = -1e9


def init_model(cfg: ModelConfig, seed: int) -> Checkpoint:
    """Fresh checkpoint with every learnable tensor ~ Normal(0, init_std^2)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    std = np.float32(cfg.init_std)
    params = {
        name: rng.standard_normal(shape, dtype=np.float32) * std
        for name, shape in param_shapes(cfg).items()
    }
    return Checkpoint(config=cfg, params=params)


def leaf_tensors(params: dict[str, Array], requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


@dataclass
class ExpertParams:
    up: Tensor
    down: Tensor


@dataclass
class LayerParams:
    """One block's tensors, viewed from a parameter map."""

    attn_norm_gain: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    moe_norm_gain: Tensor
    router_weight: Tensor
    router_bias: Tensor | None
    experts: list[ExpertParams]


def layer_view(tensors: dict[str, Tensor], cfg: ModelConfig, layer: int) -> LayerParams:
    p = f"layers.{layer}"
    return LayerParams(
        attn_norm_gain=tensors[f"{p}.attn_norm.gain"],
        wq=tensors[f"{p}.attn.wq"],
        wk=tensors[f"{p}.attn.wk"],
        wv=tensors[f"{p}.attn.wv"],
        wo=tensors[f"{p}.attn.wo"],
        moe_norm_gain=tensors[f"{p}.moe_norm.gain"],
        router_weight=tensors[f"{p}.router.weight"],
        router_bias=tensors.get(f"{p}.router.bias"),
        experts=[
            ExpertParams(up=tensors[f"{p}.experts.{e}.up"],
                         down=tensors[f"{p}.experts.{e}.down"])
            for e in range(cfg.n_experts)
        ],
    )


@dataclass
class RoutingResult:
    """Per-token selections plus per-sequence balance statistics."""

    indices: Array        # [n_tokens, k] expert ids
    gates: Array          # [n_tokens, k] mixture weights (detached copy)
    fractions: Array      # [n_seqs, n_experts] share of tokens selecting each expert
    mean_scores: Tensor   # [n_seqs, n_experts] mean sigmoid score, on the tape


@lru_cache(maxsize=32)
def _causal_mask(seq_len: int) -> Array:
    mask = np.full((seq_len, seq_len), MASK_VALUE, dtype=np.float32)
    mask = np.triu(mask, k=1)
    return mask[None, None, :, :]


def moe_layer_forward(layer: LayerParams, x: Tensor, k: int,
                      gate_normalize: bool = True, n_seqs: int = 1
                      ) -> tuple[Tensor, RoutingResult]:
    """Route each row of x to its top-k experts and mix their outputs.

    Scores are sigmoid(x @ W_r^T + bias). Gates are the selected scores,
    renormalized to sum to one per token when gate_normalize is set.
    Balance statistics are aggregated per sequence (x is n_seqs stacked
    sequences of equal length).
    """
    n_experts = layer.router_weight.shape[0]
    if not (1 <= k <= n_experts):
        raise ArgumentError(f"k={k} outside [1, {n_experts}]")
    n = x.shape[0]
    logits = T.einsum2("nd,ed->ne", x, layer.router_weight)
    if layer.router_bias is not None:
        logits = T.add(logits, layer.router_bias)
    scores = T.sigmoid(logits)

    idx = T.topk_indices(scores.data, k)                     # [n, k]
    selected = T.take_along_last(scores, idx)                # [n, k]
    if gate_normalize:
        gates = T.div(selected, selected.sum(axis=-1, keepdims=True))
    else:
        gates = selected
    gates_flat = T.reshape(gates, (n * k, 1))

    y = Tensor._wrap(np.zeros_like(x.data))
    for e in range(n_experts):
        token_rows, slot = np.nonzero(idx == e)
        if token_rows.size == 0:
            continue
        xe = T.gather_rows(x, token_rows)
        he = T.silu(T.matmul(xe, layer.experts[e].up))
        oe = T.matmul(he, layer.experts[e].down)
        we = T.gather_rows(gates_flat, token_rows * k + slot)
        y = T.add_rows(y, T.mul(oe, we), token_rows)

    seq_len = n // n_seqs
    onehot = np.zeros((n, n_experts), dtype=np.float32)
    onehot[np.repeat(np.arange(n), k), idx.ravel()] = 1.0
    fractions = onehot.reshape(n_seqs, seq_len, n_experts).mean(axis=1)
    mean_scores = T.reduce_mean(T.reshape(scores, (n_seqs, seq_len, n_experts)), axis=1)

    routing = RoutingResult(indices=idx, gates=gates.data.copy(),
                            fractions=fractions, mean_scores=mean_scores)
    return y, routing


def attention_forward(layer: LayerParams, x: Tensor, cfg: ModelConfig,
                      batch_size: int) -> Tensor:
    """Causal grouped-query attention over stacked sequences."""
    n = x.shape[0]
    seq = n // batch_size
    h, g, hd = cfg.n_heads, cfg.n_kv_groups, cfg.head_dim

    q = T.reshape(T.matmul(x, layer.wq), (batch_size, seq, h, hd))
    kk = T.reshape(T.matmul(x, layer.wk), (batch_size, seq, g, hd))
    v = T.reshape(T.matmul(x, layer.wv), (batch_size, seq, g, hd))

    q = T.rope_rotate(q, cfg.rope_base)
    kk = T.rope_rotate(kk, cfg.rope_base)
    if g != h:
        kk = T.repeat_heads(kk, h // g)
        v = T.repeat_heads(v, h // g)

    scores = T.mul(T.einsum2("bthd,bshd->bhts", q, kk), 1.0 / float(np.sqrt(hd)))
    probs = T.masked_softmax(scores, _causal_mask(seq))
    ctx = T.einsum2("bhts,bshd->bthd", probs, v)
    return T.matmul(T.reshape(ctx, (n, h * hd)), layer.wo)


def block_forward(layer: LayerParams, h: Tensor, cfg: ModelConfig,
                  batch_size: int = 1) -> tuple[Tensor, RoutingResult]:
    """One transformer block: attention sublayer then MoE sublayer.

    Pre-norm:  h + F(norm(h)); post-norm: norm(h + F(h)).
    """
    normalize = cfg.gate_normalize
    if cfg.norm_placement == "pre":
        a = attention_forward(layer, T.rms_norm(h, layer.attn_norm_gain, RMS_EPS),
                              cfg, batch_size)
        h = T.add(h, a)
        m, routing = moe_layer_forward(layer, T.rms_norm(h, layer.moe_norm_gain, RMS_EPS),
                                       cfg.top_k, normalize,
                                       n_seqs=1 if cfg.aux_global_batch else batch_size)
        h = T.add(h, m)
    else:
        a = attention_forward(layer, h, cfg, batch_size)
        h = T.rms_norm(T.add(h, a), layer.attn_norm_gain, RMS_EPS)
        m, routing = moe_layer_forward(layer, h, cfg.top_k, normalize,
                                       n_seqs=1 if cfg.aux_global_batch else batch_size)
        h = T.rms_norm(T.add(h, m), layer.moe_norm_gain, RMS_EPS)
    return h, routing


def forward_tokens(tensors: dict[str, Tensor], cfg: ModelConfig,
                   tokens: Array) -> tuple[Tensor, list[RoutingResult]]:
    """Run a [batch, seq] token array through the full model.

    Returns logits of shape [batch*seq, vocab] (row-major over batch then
    position) and one RoutingResult per layer.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ArgumentError(f"tokens must be [batch, seq], got shape {tokens.shape}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab):
        raise ArgumentError("token id outside the vocabulary")
    batch, _ = tokens.shape

    h = T.gather_rows(tensors["embed.weight"], tokens.ravel())
    routings = []
    for i in range(cfg.n_layers):
        layer = layer_view(tensors, cfg, i)
        h, routing = block_forward(layer, h, cfg, batch)
        routings.append(routing)
    if cfg.norm_placement == "pre":
        h = T.rms_norm(h, tensors["final_norm.gain"], RMS_EPS)
    logits = T.matmul(h, tensors["head.weight"])
    return logits, routings


def forward(ckpt: Checkpoint, tokens) -> tuple[Tensor, list[RoutingResult]]:
    """Single-sequence forward pass of a checkpoint."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 1:
        raise ArgumentError(f"tokens must be a 1-D sequence, got shape {tokens.shape}")
    tensors = leaf_tensors(ckpt.params)
    return forward_tokens(tensors, ckpt.config, tokens[None, :])
