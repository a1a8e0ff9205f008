"""Synthetic Markov token source with an exact entropy-rate oracle.

Rows of the transition table are softmax(concentration * z) with z drawn
once from the transition seed, so concentration 0 gives a uniform chain
and large concentration approaches a deterministic one. Because the
entropy rate is computable exactly, "converged" model checkpoints can be
defined as held-out loss within a margin of the floor.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, DataError, ReducibleChainError

Array = np.ndarray


@dataclass(frozen=True)
class CorpusSpec:
    vocab: int
    order: int
    transition_seed: int
    concentration: float
    length: int

    def __post_init__(self):
        if self.vocab < 2:
            raise ArgumentError("vocab must be at least 2")
        if self.order not in (1, 2):
            raise ArgumentError("order must be 1 or 2")
        if self.concentration < 0:
            raise ArgumentError("concentration must be non-negative")
        if self.length < 1:
            raise ArgumentError("length must be positive")


def transition_table(spec: CorpusSpec) -> Array:
    """Transition probabilities, shape [V, V] (order 1) or [V, V, V] (order 2).

    Every row sums to 1 within 1e-9.
    """
    rng = np.random.Generator(np.random.PCG64(spec.transition_seed))
    v = spec.vocab
    shape = (v, v) if spec.order == 1 else (v, v, v)
    z = rng.standard_normal(shape)
    logits = spec.concentration * z
    logits -= logits.max(axis=-1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=-1, keepdims=True)
    return p


def gen_corpus(spec: CorpusSpec, seed: int) -> Array:
    """Sample a token stream from the chain; bit-reproducible per (spec, seed)."""
    table = transition_table(spec)
    v = spec.vocab
    rng = np.random.Generator(np.random.PCG64(seed))
    uniforms = rng.random(spec.length).tolist()
    out = np.empty(spec.length, dtype=np.int32)

    if spec.order == 1:
        cum = [row.cumsum().tolist() for row in table]
        state = int(rng.integers(0, v))
        for i, u in enumerate(uniforms):
            state = bisect.bisect_left(cum[state], u)
            if state >= v:  # guard against cumulative rounding
                state = v - 1
            out[i] = state
    else:
        cum = [row.cumsum().tolist() for row in table.reshape(v * v, v)]
        prev2 = int(rng.integers(0, v))
        prev1 = int(rng.integers(0, v))
        for i, u in enumerate(uniforms):
            t = bisect.bisect_left(cum[prev2 * v + prev1], u)
            if t >= v:
                t = v - 1
            out[i] = t
            prev2, prev1 = prev1, t
    return out


def _strongly_connected(adj: Array) -> bool:
    """True when every state reaches and is reached from state 0."""
    n = adj.shape[0]

    def reach(matrix):
        seen = np.zeros(n, dtype=bool)
        seen[0] = True
        frontier = [0]
        while frontier:
            nxt = matrix[frontier].any(axis=0) & ~seen
            frontier = np.nonzero(nxt)[0].tolist()
            seen |= nxt
        return seen

    return bool(reach(adj).all() and reach(adj.T).all())


def stationary_distribution(spec: CorpusSpec, tol: float = 1e-13,
                            max_iters: int = 200000) -> Array:
    """Stationary distribution over chain states via power iteration.

    For order 2 the state space is ordered (previous, current) pairs and
    the result has shape [V, V]; order 1 gives shape [V].
    """
    table = transition_table(spec)
    v = spec.vocab
    if spec.order == 1:
        if not _strongly_connected(table > 0):
            raise ReducibleChainError("order-1 chain is not irreducible")
        pi = np.full(v, 1.0 / v)
        for _ in range(max_iters):
            nxt = pi @ table
            nxt /= nxt.sum()
            if np.abs(nxt - pi).sum() < tol:
                return nxt
            pi = nxt
        return pi

    # Order 2: state (a, b) moves to (b, t) with probability table[a, b, t].
    adj = np.zeros((v * v, v * v), dtype=bool)
    for a in range(v):
        for b in range(v):
            targets = np.nonzero(table[a, b] > 0)[0]
            adj[a * v + b, b * v + targets] = True
    if not _strongly_connected(adj):
        raise ReducibleChainError("order-2 chain is not irreducible")
    pi = np.full((v, v), 1.0 / (v * v))
    for _ in range(max_iters):
        nxt = np.einsum("ab,abt->bt", pi, table)
        nxt /= nxt.sum()
        if np.abs(nxt - pi).sum() < tol:
            return nxt
        pi = nxt
    return pi


def entropy_rate(spec: CorpusSpec) -> float:
    """Exact entropy rate in nats per token: sum_s pi_s * H(row_s)."""
    table = transition_table(spec)
    pi = stationary_distribution(spec)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(table > 0, table * np.log(table), 0.0)
    row_entropy = -plogp.sum(axis=-1)
    return float((pi * row_entropy).sum())


def batch_iter(stream: Array, batch_size: int, seq_len: int, seed=None):
    """Yield (inputs, targets) batches of non-overlapping token windows.

    Targets are inputs shifted by one position. Window order is sequential,
    or a seeded permutation when a seed is given.
    """
    stream = np.asarray(stream)
    if batch_size < 1 or seq_len < 1:
        raise ArgumentError("batch_size and seq_len must be positive")
    if stream.size < batch_size * (seq_len + 1):
        raise DataError(
            f"stream of {stream.size} tokens cannot fill a "
            f"{batch_size}x{seq_len} batch")
    n_windows = (stream.size - 1) // seq_len
    order = np.arange(n_windows)
    if seed is not None:
        order = np.random.Generator(np.random.PCG64(seed)).permutation(n_windows)
    for start in range(0, n_windows - batch_size + 1, batch_size):
        chosen = order[start:start + batch_size]
        inputs = np.stack([stream[w * seq_len: w * seq_len + seq_len] for w in chosen])
        targets = np.stack([stream[w * seq_len + 1: w * seq_len + seq_len + 1] for w in chosen])
        yield inputs, targets


def save_stream(path, stream: Array) -> None:
    """Cache a stream as flat little-endian 32-bit token ids."""
    np.asarray(stream, dtype="<i4").tofile(path)


def load_stream(path) -> Array:
    data = np.fromfile(path, dtype="<i4")
    return data.astype(np.int32, copy=False)
