"""Latent feedback recurrence over a flat token sequence.

One pass runs the stack over the current sequence. Between passes the hidden
states at the query positions are compressed by a two-layer MLP into feedback
tokens, which are appended to the *original* embedded sequence before the stack
is re-run; hidden states never carry over directly. After n passes the caller
decodes from the original query positions of the final pass. Gradients flow
through every pass (no detaching).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Module, Tensor, make_param
from .attention import AttentionMask


@dataclass(frozen=True)
class RecurrenceConfig:
    n_train: int  # recurrences unrolled during training
    n_eval: int  # recurrences at evaluation (may exceed n_train)
    max_step_embeddings: int = 4

    def __post_init__(self):
        if self.n_train < 0 or self.n_eval < 0:
            raise ValueError("recurrence counts must be >= 0")
        if self.max_step_embeddings < 0:
            raise ValueError("max_step_embeddings must be >= 0")


class FeedbackMLP(Module):
    """Two-layer GELU MLP that turns query hidden states into feedback tokens.

    With max_steps > 0, a learned per-step embedding is added; steps at or past
    the table length reuse the last entry, so evaluation can run more
    recurrences than training ever saw.
    """

    def __init__(self, dim, hidden, rng, max_steps=4):
        self.w1 = make_param((dim, hidden), ("normal", 0.0, 0.02), rng)
        self.b1 = make_param((hidden,), "zeros", rng)
        self.w2 = make_param((hidden, dim), ("normal", 0.0, 0.02), rng)
        self.b2 = make_param((dim,), "zeros", rng)
        self.max_steps = max_steps
        if max_steps > 0:
            self.step_embed = make_param((max_steps, dim), ("normal", 0.0, 0.02), rng)

    def compress(self, h_q: Tensor, step: int) -> Tensor:
        z = T.gelu(h_q @ self.w1 + self.b1) @ self.w2 + self.b2
        if self.max_steps > 0:
            idx = min(step, self.max_steps - 1)
            z = z + T.index_select(self.step_embed, 0, np.array([idx]))
        return z


@dataclass
class RecurrenceTrace:
    """Bookkeeping for one recurrent forward: sequence length at each pass."""

    seq_lens: list = field(default_factory=list)
    query_positions: np.ndarray = None
    n_feedback_blocks: int = 0
    h_first: Tensor = None  # stack output of the first pass, before any feedback


def run_recurrence(
    *,
    stack,
    feedback: FeedbackMLP,
    e0: Tensor,
    query_positions,
    mask_for,
    n_recurrences: int,
    train=False,
    rng=None,
    tag="",
    gate: Tensor = None,
):
    """Run `n_recurrences + 1` stack passes, appending one feedback block per
    recurrence. `mask_for(r)` must return the AttentionMask for a sequence with
    r feedback blocks. When `gate` is given, every feedback token is scaled by
    it before being appended, so a small gate mutes the feedback channel.
    Returns (final hidden states, trace); with n_recurrences == 0 this is
    exactly one plain stack pass over `e0`. The trace records the first pass
    output so callers can blend it with the final pass.
    """
    if n_recurrences < 0:
        raise ValueError("n_recurrences must be >= 0")
    q_pos = np.asarray(query_positions, dtype=np.int64)
    s0 = e0.shape[-2]
    if q_pos.size == 0:
        raise ValueError("recurrence needs at least one query position")
    if q_pos.min() < 0 or q_pos.max() >= s0:
        raise ValueError("query positions out of range")

    trace = RecurrenceTrace(query_positions=q_pos)
    seq = e0
    blocks = [e0]
    for r in range(n_recurrences + 1):
        mask = mask_for(r)
        if mask.size != seq.shape[-2]:
            raise ValueError(
                f"mask size {mask.size} != sequence length {seq.shape[-2]} at pass {r}"
            )
        try:
            h = stack(seq, mask, train=train, rng=rng, tag=f"{tag}pass{r}.")
            T.check_finite(h, f"recurrence pass {r}")
            trace.seq_lens.append(seq.shape[-2])
            if r == 0:
                trace.h_first = h
            if r == n_recurrences:
                trace.n_feedback_blocks = r
                return h, trace
            h_q = T.index_select(h, -2, q_pos)
            z = feedback.compress(h_q, step=r)
            if gate is not None:
                z = z * gate
            blocks.append(z)
        except T.NumericError as e:
            raise T.NumericError(f"recurrence pass {r}: {e}") from e
        seq = T.concat(blocks, axis=-2)


def select_queries(h: Tensor, query_positions) -> Tensor:
    """Hidden states at the original query positions (decode input)."""
    return T.index_select(h, -2, np.asarray(query_positions, dtype=np.int64))
