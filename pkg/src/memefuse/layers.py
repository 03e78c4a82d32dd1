"""Parameter initialization and transformer building blocks.

Blocks are post-norm residual: LN(x + sublayer(x)), feed-forward expands to
4d with gelu. Attention masks are "blocked" boolean arrays broadcastable to
the score shape (..., Lq, Lk); blocked positions score -1e9 before softmax,
so a fully blocked row degrades to uniform weights instead of NaN.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError
from .numerics import (STREAM_PARAMS, RngState, Tensor, add, concatenate,
                       dropout, gelu, layer_norm, masked_fill, matmul, scale,
                       slice_axis, softmax, transpose)

NEG_INF = -1e9


class ParamInit:
    """Deterministic parameter initializer: one counter per draw."""

    def __init__(self, seed: int):
        self._state = RngState(seed, STREAM_PARAMS)

    def normal(self, *shape, std: float = 0.02) -> Tensor:
        return Tensor(self._state.generator().standard_normal(shape) * std)

    def zeros(self, *shape) -> Tensor:
        self._state.counter += 1
        return Tensor(np.zeros(shape))

    def ones(self, *shape) -> Tensor:
        self._state.counter += 1
        return Tensor(np.ones(shape))


class Linear:
    """y = x @ W + b over the last axis."""

    def __init__(self, init: ParamInit, d_in: int, d_out: int):
        self.w = init.normal(d_in, d_out)
        self.b = init.zeros(d_out)

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.w), self.b)

    def params(self, prefix: str) -> dict:
        return {f"{prefix}/w": self.w, f"{prefix}/b": self.b}


class LayerNormParams:
    def __init__(self, init: ParamInit, d: int, eps: float = 1e-12):
        self.gain = init.ones(d)
        self.bias = init.zeros(d)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, eps=self.eps)

    def params(self, prefix: str) -> dict:
        return {f"{prefix}/gain": self.gain, f"{prefix}/bias": self.bias}


class MultiHeadAttention:
    """Scaled dot-product attention, heads carved out of d by slicing."""

    def __init__(self, init: ParamInit, d: int, heads: int):
        if d % heads != 0:
            raise DimensionError(f"hidden size {d} not divisible by {heads} heads")
        self.d = d
        self.heads = heads
        self.d_k = d // heads
        self.wq = Linear(init, d, d)
        self.wk = Linear(init, d, d)
        self.wv = Linear(init, d, d)
        self.wo = Linear(init, d, d)

    def __call__(self, queries: Tensor, memory: Tensor, blocked,
                 drop_rate: float = 0.0, rng=None, training: bool = False) -> Tensor:
        q = self.wq(queries)
        k = self.wk(memory)
        v = self.wv(memory)
        inv_sqrt_dk = 1.0 / np.sqrt(self.d_k)
        head_outs = []
        for h in range(self.heads):
            lo, hi = h * self.d_k, (h + 1) * self.d_k
            qh = slice_axis(q, -1, lo, hi)
            kh = slice_axis(k, -1, lo, hi)
            vh = slice_axis(v, -1, lo, hi)
            scores = scale(matmul(qh, transpose(kh)), inv_sqrt_dk)
            if blocked is not None:
                scores = masked_fill(scores, blocked, NEG_INF)
            weights = softmax(scores, axis=-1)
            if drop_rate > 0.0 and training:
                weights = dropout(weights, drop_rate, rng, training)
            head_outs.append(matmul(weights, vh))
        return self.wo(concatenate(head_outs, axis=-1))

    def params(self, prefix: str) -> dict:
        out = {}
        for name, lin in (("q", self.wq), ("k", self.wk), ("v", self.wv), ("o", self.wo)):
            out.update(lin.params(f"{prefix}/{name}"))
        return out


class FeedForward:
    """d -> 4d -> d with gelu."""

    def __init__(self, init: ParamInit, d: int):
        self.up = Linear(init, d, 4 * d)
        self.down = Linear(init, 4 * d, d)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(gelu(self.up(x)))

    def params(self, prefix: str) -> dict:
        return {**self.up.params(f"{prefix}/up"), **self.down.params(f"{prefix}/down")}


class TransformerBlock:
    """One attention sublayer plus feed-forward, both post-norm residual.

    Self-attention passes the block input as memory; co-attention passes
    the other stream.
    """

    def __init__(self, init: ParamInit, d: int, heads: int,
                 drop_rate: float = 0.1, ln_eps: float = 1e-12):
        self.attn = MultiHeadAttention(init, d, heads)
        self.ln1 = LayerNormParams(init, d, ln_eps)
        self.ffn = FeedForward(init, d)
        self.ln2 = LayerNormParams(init, d, ln_eps)
        self.drop_rate = drop_rate

    def __call__(self, x: Tensor, memory: Tensor, blocked,
                 rng=None, training: bool = False) -> Tensor:
        attended = self.attn(x, memory, blocked, self.drop_rate, rng, training)
        attended = dropout(attended, self.drop_rate, rng, training)
        h = self.ln1(add(x, attended))
        ff = dropout(self.ffn(h), self.drop_rate, rng, training)
        return self.ln2(add(h, ff))

    def params(self, prefix: str) -> dict:
        return {**self.attn.params(f"{prefix}/attn"), **self.ln1.params(f"{prefix}/ln1"),
                **self.ffn.params(f"{prefix}/ffn"), **self.ln2.params(f"{prefix}/ln2")}


class DecoderBlock:
    """Causal self-attention, cross-attention to a memory, feed-forward."""

    def __init__(self, init: ParamInit, d: int, heads: int,
                 drop_rate: float = 0.1, ln_eps: float = 1e-12):
        self.self_attn = MultiHeadAttention(init, d, heads)
        self.ln1 = LayerNormParams(init, d, ln_eps)
        self.cross_attn = MultiHeadAttention(init, d, heads)
        self.ln2 = LayerNormParams(init, d, ln_eps)
        self.ffn = FeedForward(init, d)
        self.ln3 = LayerNormParams(init, d, ln_eps)
        self.drop_rate = drop_rate

    def __call__(self, x: Tensor, memory: Tensor, causal_blocked,
                 rng=None, training: bool = False) -> Tensor:
        own = self.self_attn(x, x, causal_blocked, self.drop_rate, rng, training)
        h = self.ln1(add(x, dropout(own, self.drop_rate, rng, training)))
        cross = self.cross_attn(h, memory, None, self.drop_rate, rng, training)
        h = self.ln2(add(h, dropout(cross, self.drop_rate, rng, training)))
        ff = dropout(self.ffn(h), self.drop_rate, rng, training)
        return self.ln3(add(h, ff))

    def params(self, prefix: str) -> dict:
        return {**self.self_attn.params(f"{prefix}/self"),
                **self.ln1.params(f"{prefix}/ln1"),
                **self.cross_attn.params(f"{prefix}/cross"),
                **self.ln2.params(f"{prefix}/ln2"),
                **self.ffn.params(f"{prefix}/ffn"),
                **self.ln3.params(f"{prefix}/ln3")}


def causal_blocked(length: int) -> np.ndarray:
    """Upper-triangular blocked mask: position t may attend to 0..t."""
    return np.triu(np.ones((length, length), dtype=bool), k=1)


def key_padding_blocked(mask: np.ndarray) -> np.ndarray:
    """(B, Lk) keep-mask -> (B, 1, Lk) blocked mask for broadcasting."""
    return (np.asarray(mask) == 0)[:, None, :]
