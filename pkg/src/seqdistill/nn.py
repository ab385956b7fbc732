"""Small layer library shared by the recommender and the frozen encoder.

Everything here composes numcore primitives; layers own their `Param`s and
expose them through ``params()`` so trainers and checkpoints can enumerate
state by name.
"""

import numpy as np

from seqdistill.numcore import Param, seeded_init
from seqdistill.numcore import ops


class Linear:
    def __init__(self, d_in, d_out, name, rng, frozen=False):
        self.w = Param(
            seeded_init((d_in, d_out), "uniform-xavier", rng).data,
            name=f"{name}.w", frozen=frozen,
        )
        self.b = Param(
            seeded_init((d_out,), "zeros", rng).data,
            name=f"{name}.b", frozen=frozen,
        )

    def __call__(self, x):
        return ops.add(ops.matmul(x, self.w), self.b)

    def params(self):
        return [self.w, self.b]


class LayerNorm:
    def __init__(self, d, name, rng=None, frozen=False, eps=1e-5):
        self.gain = Param(np.ones(d), name=f"{name}.gain", frozen=frozen)
        self.bias = Param(np.zeros(d), name=f"{name}.bias", frozen=frozen)
        self.eps = eps

    def __call__(self, x):
        return ops.layernorm(x, self.gain, self.bias, eps=self.eps)

    def params(self):
        return [self.gain, self.bias]


class Mlp2:
    """Two-layer MLP with gelu; hidden width equals the output width."""

    def __init__(self, d_in, d_out, name, rng, frozen=False):
        self.lin1 = Linear(d_in, d_out, f"{name}.lin1", rng, frozen=frozen)
        self.lin2 = Linear(d_out, d_out, f"{name}.lin2", rng, frozen=frozen)

    def __call__(self, x):
        return self.lin2(ops.gelu(self.lin1(x)))

    def params(self):
        return self.lin1.params() + self.lin2.params()


def causal_blocked(length):
    """(L, L) bool mask, True where attention is NOT allowed (j > i)."""
    return np.triu(np.ones((length, length), dtype=bool), k=1)


class SelfAttention:
    """Multi-head causal self-attention over (B, L, D) activations."""

    def __init__(self, d, heads, name, rng, frozen=False):
        if d % heads:
            raise ValueError("model width must divide evenly across heads")
        self.d = d
        self.heads = heads
        self.dh = d // heads
        self.wq = Linear(d, d, f"{name}.wq", rng, frozen=frozen)
        self.wk = Linear(d, d, f"{name}.wk", rng, frozen=frozen)
        self.wv = Linear(d, d, f"{name}.wv", rng, frozen=frozen)
        self.wo = Linear(d, d, f"{name}.wo", rng, frozen=frozen)
        self.scale = 1.0 / np.sqrt(self.dh)

    def _split_heads(self, x, batch, length):
        x = ops.reshape(x, (batch, length, self.heads, self.dh))
        x = ops.transpose(x, (0, 2, 1, 3))
        return ops.reshape(x, (batch * self.heads, length, self.dh))

    def __call__(self, x, blocked):
        """``blocked``: bool (L, L) or (B, L, L); True entries are masked."""
        batch, length, _ = x.shape
        q = self._split_heads(self.wq(x), batch, length)
        k = self._split_heads(self.wk(x), batch, length)
        v = self._split_heads(self.wv(x), batch, length)
        scores = ops.mul(ops.matmul(q, ops.transpose(k, (0, 2, 1))), self.scale)
        if blocked.ndim == 2:
            mask = np.broadcast_to(blocked, (batch * self.heads, length, length))
        else:
            mask = np.repeat(blocked, self.heads, axis=0)
        scores = ops.masked_fill(scores, mask, -1e9)
        att = ops.softmax(scores)
        out = ops.matmul(att, v)
        out = ops.reshape(out, (batch, self.heads, length, self.dh))
        out = ops.transpose(out, (0, 2, 1, 3))
        out = ops.reshape(out, (batch, length, self.d))
        return self.wo(out)

    def params(self):
        return (
            self.wq.params() + self.wk.params()
            + self.wv.params() + self.wo.params()
        )


class TransformerBlock:
    """Pre-norm causal block: attention and pointwise feed-forward, each with
    a residual connection."""

    def __init__(self, d, heads, ff_mult, name, rng, frozen=False, activation="relu"):
        self.ln1 = LayerNorm(d, f"{name}.ln1", frozen=frozen)
        self.attn = SelfAttention(d, heads, f"{name}.attn", rng, frozen=frozen)
        self.ln2 = LayerNorm(d, f"{name}.ln2", frozen=frozen)
        self.ff1 = Linear(d, d * ff_mult, f"{name}.ff1", rng, frozen=frozen)
        self.ff2 = Linear(d * ff_mult, d, f"{name}.ff2", rng, frozen=frozen)
        self.act = ops.relu if activation == "relu" else ops.gelu

    def __call__(self, x, blocked, dropout_rate=0.0, drop_rng=None, training=False):
        a = self.attn(self.ln1(x), blocked)
        a = ops.dropout(a, dropout_rate, drop_rng, training)
        x = ops.add(x, a)
        f = self.ff2(self.act(self.ff1(self.ln2(x))))
        f = ops.dropout(f, dropout_rate, drop_rng, training)
        return ops.add(x, f)

    def params(self):
        return (
            self.ln1.params() + self.attn.params() + self.ln2.params()
            + self.ff1.params() + self.ff2.params()
        )
