"""Dense float64 tensors with reverse-mode differentiation on an explicit tape.

A ``Tape`` records every tracked operation as an append-only node, so node
ids are already in topological order and ``backward`` is a single reverse
sweep. A tensor participates in differentiation only while the tape that
watched it is the active one (``with Tape() as tape:``); anything else is
treated as a constant. All arithmetic is in 64-bit floats so that central
finite differences with h=1e-6 resolve gradients to ~1e-9.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from ..errors import DimensionError, TapeError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

_STATE = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_STATE, "tape", None)


class Tensor:
    """Row-major float64 array, optionally bound to a differentiation tape."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape: "Tape | None" = None, node_id: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, tracked={self.node_id is not None})"

    # Operator sugar; all math lives in the module-level op functions.
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class GradTable:
    """Per-node gradient accumulators produced by one backward sweep."""

    def __init__(self, tape: "Tape", grads: list):
        self._tape = tape
        self._grads = grads

    def wrt(self, t: Tensor) -> np.ndarray:
        """Gradient of the root with respect to ``t`` (zeros if unreached)."""
        if t.tape is not self._tape or t.node_id is None:
            raise TapeError("tensor is not tracked on the tape that produced this table")
        g = self._grads[t.node_id]
        return g if g is not None else np.zeros_like(t.data)


class Tape:
    """Append-only record of tracked operations.

    Node inputs always have smaller ids than the node itself, so the list
    order is a topological order and ``backward`` can sweep ids in reverse.
    """

    def __init__(self):
        # node: (op tag, input node ids, backward closure, output shape)
        self.nodes: list[tuple] = []
        self._backward_done = False
        self._prev_tape: "Tape | None" = None

    def __enter__(self) -> "Tape":
        self._prev_tape = _active_tape()
        _STATE.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _STATE.tape = self._prev_tape
        return False

    def watch(self, t: Tensor) -> Tensor:
        """Register ``t`` as a leaf so gradients accumulate for it."""
        if t.tape is self and t.node_id is not None:
            return t
        t.tape = self
        t.node_id = self._record("leaf", (), None, t.shape)
        return t

    def _record(self, op: str, input_ids: tuple, backward_fn, shape) -> int:
        node_id = len(self.nodes)
        self.nodes.append((op, input_ids, backward_fn, shape))
        return node_id

    def reset(self) -> None:
        """Allow another backward sweep over the same recorded graph."""
        self._backward_done = False

    def backward(self, root: Tensor) -> GradTable:
        """Reverse sweep from a scalar root; returns gradients for all reached nodes."""
        if root.tape is not self or root.node_id is None:
            raise TapeError("backward root is not tracked on this tape")
        if root.size != 1:
            raise TapeError(f"backward root must be a scalar, got shape {root.shape}")
        if self._backward_done:
            raise TapeError("backward already ran on this tape; call reset() first")
        self._backward_done = True

        grads: list = [None] * len(self.nodes)
        grads[root.node_id] = np.ones_like(root.data)
        for node_id in range(root.node_id, -1, -1):
            g = grads[node_id]
            if g is None:
                continue
            op, input_ids, backward_fn, _shape = self.nodes[node_id]
            if backward_fn is None:
                continue
            for in_id, in_grad in zip(input_ids, backward_fn(g)):
                if in_id is None or in_grad is None:
                    continue
                if grads[in_id] is None:
                    grads[in_id] = in_grad
                else:
                    grads[in_id] = grads[in_id] + in_grad
        return GradTable(self, grads)


def _track(op: str, out: np.ndarray, inputs: Sequence[Tensor],
           backward_fn: Callable) -> Tensor:
    """Wrap ``out``; record a tape node if any input is live on the active tape."""
    tape = _active_tape()
    if tape is None:
        return Tensor(out)
    input_ids = tuple(
        t.node_id if (t.tape is tape and t.node_id is not None) else None
        for t in inputs
    )
    if all(i is None for i in input_ids):
        return Tensor(out)
    node_id = tape._record(op, input_ids, backward_fn, out.shape)
    return Tensor(out, tape=tape, node_id=node_id)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _track("add", out, (a, b), lambda g: (
        _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return _track("sub", out, (a, b), lambda g: (
        _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return _track("mul", out, (a, b), lambda g: (
        _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _track("scale", a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; stacked leading axes follow numpy broadcasting."""
    A, B = a.data, b.data
    if A.ndim < 2 or B.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {A.shape} x {B.shape}")
    if A.shape[-1] != B.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {A.shape} x {B.shape}")
    out = A @ B

    def backward(g):
        ga = _unbroadcast(g @ B.swapaxes(-1, -2), A.shape)
        gb = _unbroadcast(A.swapaxes(-1, -2) @ g, B.shape)
        return ga, gb

    return _track("matmul", out, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.data.ndim < 2:
        raise DimensionError(f"transpose needs >=2-d input, got {a.shape}")
    return _track("transpose", a.data.swapaxes(-1, -2), (a,),
                  lambda g: (g.swapaxes(-1, -2),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.data.shape
    return _track("reshape", a.data.reshape(shape), (a,),
                  lambda g: (g.reshape(old),))


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return _track("concat", out, tensors, backward)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equal-shaped tensors along a new leading axis."""
    tensors = list(tensors)
    out = np.stack([t.data for t in tensors], axis=0)
    return _track("stack", out, tensors,
                  lambda g: tuple(g[i] for i in range(len(tensors))))


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start, stop) along one axis."""
    n = a.data.shape[axis]
    if not (0 <= start <= stop <= n):
        raise DimensionError(f"slice [{start}:{stop}) out of range for axis {axis} of {a.shape}")
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _track("slice", out, (a,), backward)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.data.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _track("sum", np.asarray(out), (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.data.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    mask = a.data > 0.0
    return _track("relu", out, (a,), lambda g: (g * mask,))


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) gelu: 0.5 x (1 + erf(x/sqrt(2)))."""
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * phi
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    return _track("gelu", out, (a,), lambda g: (g * (phi + x * pdf),))


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)
    return _track("log", out, (a,), lambda g: (g / a.data,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only through the un-clamped region."""
    out = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)
    return _track("clip", out, (a,), lambda g: (g * inside,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``; slices sum to 1."""
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - inner),)

    return _track("softmax", s, (a,), backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = a.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise DimensionError(
            f"layer_norm gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}")
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def backward(g):
        gg = g * gain.data
        gx = inv_std * (gg - gg.mean(axis=-1, keepdims=True)
                        - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        g_gain = (g * xhat).sum(axis=lead)
        g_bias = g.sum(axis=lead)
        return gx, g_gain, g_bias

    return _track("layer_norm", out, (a, gain, bias), backward)


# ---------------------------------------------------------------------------
# lookups, masking, dropout, losses
# ---------------------------------------------------------------------------

def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; backward scatter-adds over repeated ids."""
    ids = np.asarray(ids, dtype=np.int64)
    V = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        bad = ids[(ids < 0) | (ids >= V)][0]
        raise IndexError(f"embedding id {int(bad)} out of range for table of {V} rows")
    out = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _track("embedding", out, (table,), backward)


def masked_fill(a: Tensor, mask, value: float) -> Tensor:
    """Replace positions where ``mask`` is true by ``value``; no gradient there."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.data.shape)
    out = np.where(mask, value, a.data)
    return _track("masked_fill", out, (a,), lambda g: (np.where(mask, 0.0, g),))


def dropout(a: Tensor, rate: float, rng: np.random.Generator,
            training: bool) -> Tensor:
    """Inverted dropout; identity when not training or rate is 0."""
    if not training or rate <= 0.0:
        return a
    keep = rng.random(a.data.shape) >= rate
    factor = keep / (1.0 - rate)
    return _track("dropout", a.data * factor, (a,), lambda g: (g * factor,))


def cross_entropy_logits(logits: Tensor, ids) -> Tensor:
    """Per-position negative log-likelihood of ``ids`` under softmax(logits).

    ``logits`` has shape (..., V); ``ids`` has the leading shape. Computed
    through log-sum-exp so large logits stay finite.
    """
    ids = np.asarray(ids, dtype=np.int64)
    x = logits.data
    if ids.shape != x.shape[:-1]:
        raise DimensionError(f"ids shape {ids.shape} does not match logits {x.shape}")
    m = x.max(axis=-1, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=-1)) + m[..., 0]
    picked = np.take_along_axis(x, ids[..., None], axis=-1)[..., 0]
    out = lse - picked

    def backward(g):
        p = np.exp(shifted)
        p /= p.sum(axis=-1, keepdims=True)
        idx = ids[..., None]
        np.put_along_axis(p, idx, np.take_along_axis(p, idx, axis=-1) - 1.0, axis=-1)
        return (p * g[..., None],)

    return _track("xent", out, (logits,), backward)
