"""Dense float32 tensors with a linear reverse-mode gradient tape.

Storage is row-major numpy on the CPU. Ops are pure: they allocate fresh
tensors and never mutate their inputs, so a tensor is an immutable value
once created. While a GradTape is active, every op whose inputs require
gradients appends one record to the tape; ``tape.backward(loss)`` replays
the records exactly once each, in reverse execution order.

Every op checks its output for non-finite values and raises NumericsError
instead of letting inf/nan propagate silently.
"""

from __future__ import annotations

import numpy as np

from .errors import ArgumentError, DimensionError, NumericsError

Array = np.ndarray


def _as_f32(data) -> Array:
    return np.ascontiguousarray(data, dtype=np.float32)


def _check_finite(data: Array, op: str) -> None:
    if not np.isfinite(data).all():
        raise NumericsError(f"{op} produced non-finite values")


class Tensor:
    """Immutable dense float32 value."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f32(data)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None

    @classmethod
    def _wrap(cls, data: Array) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data if data.dtype == np.float32 else _as_f32(data)
        out.requires_grad = False
        out.grad = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> Array:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis, keepdims)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class GradTape:
    """Linear record of executed ops for one backward pass.

    Use as a context manager around the forward computation; nested tapes
    are not supported.
    """

    _active: "GradTape | None" = None

    def __init__(self):
        self._records: list[tuple[Tensor, object]] = []

    def __enter__(self) -> "GradTape":
        if GradTape._active is not None:
            raise ArgumentError("a GradTape is already active")
        GradTape._active = self
        return self

    def __exit__(self, exc_type, exc, tb):
        GradTape._active = None
        return False

    def __len__(self) -> int:
        return len(self._records)

    def _record(self, out: Tensor, backward) -> None:
        self._records.append((out, backward))

    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)/d(input) to every recorded tensor's .grad."""
        if loss.data.size != 1:
            raise DimensionError("backward requires a scalar loss")
        loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(self._records):
            if out.grad is not None:
                fn(out.grad)


def _accum(t: Tensor, g: Array) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float32)
    else:
        t.grad += g


def _finish(data: Array, op: str, inputs: tuple[Tensor, ...], backward) -> Tensor:
    _check_finite(data, op)
    out = Tensor._wrap(data)
    tape = GradTape._active
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._record(out, backward)
    return out


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _operand(x):
    """Split an operand into (array, tensor-or-None); non-tensors are constants."""
    if isinstance(x, Tensor):
        return x.data, x
    if isinstance(x, (int, float)):
        return np.float32(x), None
    if isinstance(x, np.ndarray):
        return x.astype(np.float32, copy=False), None
    raise ArgumentError(f"unsupported operand type {type(x).__name__}")


def _binary(op_name, a, b, fwd, grad_a, grad_b) -> Tensor:
    ad, at = _operand(a)
    bd, bt = _operand(b)
    data = fwd(ad, bd)
    inputs = tuple(t for t in (at, bt) if t is not None)

    def backward(g):
        if at is not None and at.requires_grad:
            _accum(at, _unbroadcast(grad_a(g, ad, bd), at.data.shape))
        if bt is not None and bt.requires_grad:
            _accum(bt, _unbroadcast(grad_b(g, ad, bd), bt.data.shape))

    return _finish(data, op_name, inputs, backward)


def add(a, b) -> Tensor:
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        return _binary("div", a, b, lambda x, y: x / y,
                       lambda g, x, y: g / y,
                       lambda g, x, y: -g * x / (y * y))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product with the standard gradient rules."""
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise ArgumentError("matmul expects two tensors")
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _finish(data, "matmul", (a, b), backward)


def einsum2(subscripts: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum.

    Each index of one operand must appear in the output or in the other
    operand, which makes the gradient another einsum with the roles of
    output and operand swapped.
    """
    try:
        lhs, out_spec = subscripts.replace(" ", "").split("->")
        spec_a, spec_b = lhs.split(",")
    except ValueError as exc:
        raise ArgumentError(f"bad einsum spec {subscripts!r}") from exc
    for own, other in ((spec_a, spec_b), (spec_b, spec_a)):
        missing = set(own) - set(out_spec) - set(other)
        if missing:
            raise ArgumentError(f"einsum index {missing} not recoverable in {subscripts!r}")
    data = np.einsum(subscripts, a.data, b.data)

    def backward(g):
        if a.requires_grad:
            _accum(a, np.einsum(f"{out_spec},{spec_b}->{spec_a}", g, b.data))
        if b.requires_grad:
            _accum(b, np.einsum(f"{out_spec},{spec_a}->{spec_b}", g, a.data))

    return _finish(data, "einsum2", (a, b), backward)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    old_shape = a.data.shape

    def backward(g):
        _accum(a, g.reshape(old_shape))

    return _finish(np.ascontiguousarray(data), "reshape", (a,), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(int(x) for x in axes)
    inverse = np.argsort(axes)
    data = np.ascontiguousarray(a.data.transpose(axes))

    def backward(g):
        _accum(a, g.transpose(inverse))

    return _finish(data, "transpose", (a,), backward)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)
    in_shape = a.data.shape

    def backward(g):
        gg = g
        if not keepdims and axis is not None:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, in_shape))

    return _finish(np.asarray(data, dtype=np.float32), "sum", (a,), backward)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.mean(axis=axis, keepdims=keepdims, dtype=np.float32)
    in_shape = a.data.shape
    count = a.data.size if axis is None else np.prod(
        [in_shape[i] for i in np.atleast_1d(axis)])

    def backward(g):
        gg = g
        if not keepdims and axis is not None:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, in_shape) / np.float32(count))

    return _finish(np.asarray(data, dtype=np.float32), "mean", (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        _accum(a, g * out * (1.0 - out))

    return _finish(out, "sigmoid", (a,), backward)


def silu(a: Tensor) -> Tensor:
    """Self-gated activation x * sigmoid(x)."""
    x = a.data
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    data = x * s

    def backward(g):
        _accum(a, g * (s + x * s * (1.0 - s)))

    return _finish(data, "silu", (a,), backward)


def masked_softmax(a: Tensor, mask: Array | None = None) -> Tensor:
    """Softmax along the last axis, applied after adding a constant mask."""
    x = a.data if mask is None else a.data + mask
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        _accum(a, (g - dot) * p)

    return _finish(p, "masked_softmax", (a,), backward)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """x / sqrt(mean(x^2, last axis) + eps) * gain."""
    if eps < 0:
        raise ArgumentError("eps must be non-negative")
    if gain.ndim != 1 or x.shape[-1] != gain.shape[0]:
        raise DimensionError(f"gain shape {gain.shape} does not match input {x.shape}")
    xd = x.data
    d = xd.shape[-1]
    ms = (xd * xd).mean(axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(ms + np.float32(eps))
    data = xd * r * gain.data

    def backward(g):
        if gain.requires_grad:
            gg = (g * xd * r).reshape(-1, d).sum(axis=0)
            _accum(gain, gg)
        if x.requires_grad:
            gy = g * gain.data
            dot = (gy * xd).sum(axis=-1, keepdims=True)
            _accum(x, gy * r - xd * (r ** 3) * dot / np.float32(d))

    return _finish(data, "rms_norm", (x, gain), backward)


def _rope_angles(positions: Array, head_dim: int, base: float):
    half = head_dim // 2
    inv = np.power(np.float32(base), -2.0 * np.arange(half, dtype=np.float32) / np.float32(head_dim))
    ang = positions.astype(np.float32)[:, None] * inv[None, :]
    return np.cos(ang)[:, None, :], np.sin(ang)[:, None, :]


def rope_rotate(x: Tensor, base: float, positions=None) -> Tensor:
    """Rotary position transform of adjacent value pairs.

    The sequence axis is the third-from-last; pair j of the last axis is
    rotated by angle pos * base^(-2j/head_dim). Accepts [seq, heads, d] or
    [batch, seq, heads, d]. The per-pair Euclidean norm is preserved.
    """
    if x.ndim < 3:
        raise DimensionError(f"rope_rotate needs at least 3 dims, got {x.shape}")
    head_dim = x.shape[-1]
    if head_dim % 2 != 0:
        raise DimensionError(f"head dimension must be even, got {head_dim}")
    seq = x.shape[-3]
    if positions is None:
        positions = np.arange(seq)
    positions = np.asarray(positions)
    if positions.shape != (seq,):
        raise DimensionError(f"positions shape {positions.shape} != ({seq},)")
    cos, sin = _rope_angles(positions, head_dim, base)

    def rot(arr, c, s):
        even = arr[..., 0::2]
        odd = arr[..., 1::2]
        out = np.empty_like(arr)
        out[..., 0::2] = even * c - odd * s
        out[..., 1::2] = even * s + odd * c
        return out

    data = rot(x.data, cos, sin)

    def backward(g):
        _accum(x, rot(g, cos, -sin))

    return _finish(data, "rope_rotate", (x,), backward)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-softmax of the target logits, in nats."""
    if logits.ndim != 2:
        raise DimensionError(f"logits must be [n, vocab], got {logits.shape}")
    t = np.asarray(targets)
    n, vocab = logits.shape
    if t.shape != (n,):
        raise DimensionError(f"targets shape {t.shape} != ({n},)")
    if t.size and (t.min() < 0 or t.max() >= vocab):
        raise ArgumentError("target index outside the vocabulary")
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=1)) + m[:, 0]
    picked = x[np.arange(n), t]
    data = np.float32((lse - picked).mean())

    def backward(g):
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), t] -= 1.0
        _accum(logits, p * (np.float32(g) / np.float32(n)))

    return _finish(np.asarray(data), "cross_entropy", (logits,), backward)


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows a[idx]; the gradient scatter-adds back."""
    idx = np.asarray(idx)
    if idx.ndim != 1:
        raise DimensionError("row index must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ArgumentError("row index out of range")
    data = a.data[idx]

    def backward(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.add.at(ga, idx, g)
            _accum(a, ga)

    return _finish(np.ascontiguousarray(data), "gather_rows", (a,), backward)


def take_along_last(a: Tensor, idx) -> Tensor:
    """Pick entries along the last axis by integer index."""
    idx = np.asarray(idx)
    if idx.shape[:-1] != a.shape[:-1]:
        raise DimensionError(f"index shape {idx.shape} incompatible with {a.shape}")
    data = np.take_along_axis(a.data, idx, axis=-1)

    def backward(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            lead = np.indices(idx.shape[:-1] + (idx.shape[-1],))[:-1]
            np.add.at(ga, tuple(lead) + (idx,), g)
            _accum(a, ga)

    return _finish(np.ascontiguousarray(data), "take_along_last", (a,), backward)


def add_rows(base: Tensor, rows: Tensor, idx) -> Tensor:
    """Return base with rows[i] added at position idx[i]."""
    idx = np.asarray(idx)
    if rows.shape[0] != idx.shape[0] or rows.shape[1:] != base.shape[1:]:
        raise DimensionError(f"rows {rows.shape} do not fit base {base.shape}")
    data = base.data.copy()
    np.add.at(data, idx, rows.data)

    def backward(g):
        if base.requires_grad:
            _accum(base, g)
        if rows.requires_grad:
            _accum(rows, g[idx])

    return _finish(data, "add_rows", (base, rows), backward)


def repeat_heads(x: Tensor, times: int) -> Tensor:
    """Repeat the head axis (axis 2 of a 4-D tensor) `times` times."""
    if x.ndim != 4:
        raise DimensionError(f"repeat_heads needs a 4-D tensor, got {x.shape}")
    times = int(times)
    b, t, h, d = x.shape
    data = np.repeat(x.data, times, axis=2)

    def backward(g):
        _accum(x, g.reshape(b, t, h, times, d).sum(axis=3))

    return _finish(data, "repeat_heads", (x,), backward)


def topk_indices(scores: Array, k: int) -> Array:
    """Row-wise top-k column indices of a 2-D score array.

    Rows are ordered by descending score; equal scores break toward the
    lower index. This tie rule is relied on by expert-duplication growth.
    """
    scores = np.asarray(scores)
    if not (1 <= k <= scores.shape[-1]):
        raise ArgumentError(f"k={k} outside [1, {scores.shape[-1]}]")
    order = np.argsort(-scores, axis=-1, kind="stable")
    return np.ascontiguousarray(order[..., :k])


def top_k_select(scores, k: int) -> tuple[list[int], list[float]]:
    """Top-k entries of a 1-D score vector.

    Returns (indices, values) sorted by descending score, ties broken by
    ascending index.
    """
    data = scores.data if isinstance(scores, Tensor) else np.asarray(scores, dtype=np.float32)
    if data.ndim != 1:
        raise DimensionError(f"scores must be 1-D, got shape {data.shape}")
    idx = topk_indices(data[None, :], int(k))[0]
    return [int(i) for i in idx], [float(data[i]) for i in idx]
