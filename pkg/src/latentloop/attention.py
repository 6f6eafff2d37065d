"""Multi-head attention, pre-norm transformer blocks, and block stacks.

Everything operates on [..., S, D] so callers can fold arbitrary batch axes in
front. Masking is a boolean [S, S] matrix (True = may attend); masked logits
become -inf before the softmax, so forbidden weights are exactly zero.
Positional information is injected by callers, never here.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Module, Tensor, make_param

# group -> set of groups its rows may attend to; same-group membership includes
# self, so a context row always has at least one target
DEFAULT_GROUP_RULE = {
    "context": frozenset({"context"}),
    "query": frozenset({"context", "feedback"}),
    "feedback": frozenset({"context", "query", "feedback"}),
}

_capture_sink = None


@contextmanager
def capture_attention():
    """Collect (tag, softmax weights) from every attention call in the block."""
    global _capture_sink
    prev = _capture_sink
    sink = []
    _capture_sink = sink
    try:
        yield sink
    finally:
        _capture_sink = prev


class AttentionMask:
    """Square boolean mask; row i may attend column j iff allowed[i, j]."""

    def __init__(self, allowed):
        allowed = np.asarray(allowed, dtype=bool)
        if allowed.ndim != 2 or allowed.shape[0] != allowed.shape[1]:
            raise ValueError(f"mask must be square, got {allowed.shape}")
        empty = ~allowed.any(axis=1)
        if empty.any():
            rows = np.nonzero(empty)[0].tolist()
            raise T.DegenerateMaskError(f"mask rows with no targets: {rows}")
        self.allowed = allowed

    @property
    def size(self):
        return self.allowed.shape[0]

    @staticmethod
    def full(n):
        return AttentionMask(np.ones((n, n), dtype=bool))

    @staticmethod
    def from_groups(groups, rule=None):
        rule = rule or DEFAULT_GROUP_RULE
        groups = list(groups)
        n = len(groups)
        allowed = np.zeros((n, n), dtype=bool)
        for i, gi in enumerate(groups):
            targets = rule[gi]
            for j, gj in enumerate(groups):
                allowed[i, j] = gj in targets
        return AttentionMask(allowed)


@dataclass(frozen=True)
class BlockConfig:
    model_dim: int
    n_heads: int
    ffn_dim: int
    dropout: float = 0.0

    def __post_init__(self):
        if self.model_dim % self.n_heads != 0:
            raise ValueError(
                f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


@dataclass(frozen=True)
class StackConfig:
    """plain(L): L distinct blocks once. deeper(L): 2L distinct blocks once.
    looped(K, M): K distinct blocks applied M times in order (weights reused)."""

    kind: str
    n_blocks: int
    repeats: int
    block: BlockConfig

    @staticmethod
    def plain(n_layers, block):
        return StackConfig("plain", n_layers, 1, block)

    @staticmethod
    def deeper(n_layers, block):
        return StackConfig("deeper", 2 * n_layers, 1, block)

    @staticmethod
    def looped(k, m, block):
        if k < 1 or m < 1:
            raise ValueError("looped stack needs k >= 1 and m >= 1")
        return StackConfig("looped", k, m, block)

    @property
    def effective_depth(self):
        return self.n_blocks * self.repeats


class Linear(Module):
    def __init__(self, d_in, d_out, rng, init_std=0.02):
        self.w = make_param((d_in, d_out), ("normal", 0.0, init_std), rng)
        self.b = make_param((d_out,), "zeros", rng)

    def __call__(self, x):
        return x @ self.w + self.b


class MultiHeadAttention(Module):
    def __init__(self, cfg: BlockConfig, rng):
        d = cfg.model_dim
        self.cfg = cfg
        self.head_dim = d // cfg.n_heads
        self.wq = Linear(d, d, rng)
        self.wk = Linear(d, d, rng)
        self.wv = Linear(d, d, rng)
        self.wo = Linear(d, d, rng)

    def __call__(self, x, mask: AttentionMask, train=False, rng=None, tag=""):
        h = self.cfg.n_heads
        dh = self.head_dim
        lead = x.shape[:-2]
        s = x.shape[-2]
        if mask.size != s:
            raise ValueError(f"mask size {mask.size} != sequence length {s}")

        if not (train and self.cfg.dropout > 0.0):
            # Hot path: the whole attention as one recorded op. Dropout is
            # inactive here, so the unfused chain below would compute the
            # same values node by node.
            sink = [] if _capture_sink is not None else None
            out = T.attention_context(
                x, self.wq.w, self.wq.b, self.wk.w, self.wk.b,
                self.wv.w, self.wv.b, self.wo.w, self.wo.b,
                mask.allowed, h, weights_sink=sink)
            if sink is not None:
                _capture_sink.append((tag, sink[0]))
            return out

        def split(t):
            t = t.reshape(*lead, s, h, dh)
            return t.swapaxes(-2, -3)  # [..., h, s, dh]

        q = split(self.wq(x))
        k = split(self.wk(x))
        v = split(self.wv(x))
        logits = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
        logits = T.mask_fill(logits, mask.allowed)
        weights = T.softmax(logits, axis=-1)
        if _capture_sink is not None:
            _capture_sink.append((tag, weights.data.copy()))
        weights = T.dropout(weights, self.cfg.dropout, rng, train)
        ctx = weights @ v
        ctx = ctx.swapaxes(-2, -3).reshape(*lead, s, h * dh)
        return self.wo(ctx)


class TransformerBlock(Module):
    """Pre-norm: x + Attn(LN(x)), then + FFN(LN(.)). Dropout hits attention
    weights and the FFN hidden activation only."""

    def __init__(self, cfg: BlockConfig, rng):
        self.cfg = cfg
        self.ln1_g = make_param((cfg.model_dim,), "ones", rng)
        self.ln1_b = make_param((cfg.model_dim,), "zeros", rng)
        self.attn = MultiHeadAttention(cfg, rng)
        self.ln2_g = make_param((cfg.model_dim,), "ones", rng)
        self.ln2_b = make_param((cfg.model_dim,), "zeros", rng)
        self.ffn_in = Linear(cfg.model_dim, cfg.ffn_dim, rng)
        self.ffn_out = Linear(cfg.ffn_dim, cfg.model_dim, rng)

    def __call__(self, x, mask, train=False, rng=None, tag=""):
        a = self.attn(
            T.layer_norm(x, self.ln1_g, self.ln1_b), mask, train=train, rng=rng, tag=tag
        )
        x = x + a
        hid = T.gelu(self.ffn_in(T.layer_norm(x, self.ln2_g, self.ln2_b)))
        hid = T.dropout(hid, self.cfg.dropout, rng, train)
        return x + self.ffn_out(hid)


class TransformerStack(Module):
    def __init__(self, cfg: StackConfig, rng):
        self.cfg = cfg
        self.blocks = [TransformerBlock(cfg.block, rng) for _ in range(cfg.n_blocks)]
        self.depth_count = 0  # block applications in the most recent forward

    def __call__(self, x, mask, train=False, rng=None, tag=""):
        self.depth_count = 0
        for rep in range(self.cfg.repeats):
            for i, block in enumerate(self.blocks):
                x = block(x, mask, train=train, rng=rng, tag=f"{tag}rep{rep}.block{i}")
                self.depth_count += 1
        return x
