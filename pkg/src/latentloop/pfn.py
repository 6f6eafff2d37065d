"""Row-layout tabular model with gated feedback recurrence.

Every table row is d+1 cell vectors: the d feature cells plus one label cell
(always the last column). Blocks alternate feature attention (within a row,
unmasked) and datapoint attention (per column across rows, group-masked), then
apply an FFN; all sublayers are pre-norm residual.

Recurrence appends whole feedback rows: the label cell holds the gated
MLP-compressed label-column state of each query row, and the d feature cells
hold a gated learned marker vector. After the final pass the output is the
gated interpolation h0 + g*(hR - h0) between the first pass and the last,
restricted to the original rows. With zero recurrences the gate, marker, and
feedback MLP never enter the computation at all.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .attention import (
    DEFAULT_GROUP_RULE,
    AttentionMask,
    BlockConfig,
    Linear,
    MultiHeadAttention,
)
from .recurrence import FeedbackMLP, RecurrenceConfig
from .tabular import TaskBatch, cross_entropy, stack_tasks
from .tensor import Module, Tensor, make_param

CELL_STD_EPS = 1e-8


def build_feedback_rows(h_q: Tensor, mlp: FeedbackMLP, marker, gate, n_feature_columns):
    """Assemble feedback rows [B, n_q, d+1, E] from query label-column states.

    The label cell (last column) is gate * mlp(h_q); each of the d feature
    cells is gate * marker.
    """
    b, n_q, e = h_q.shape
    d = n_feature_columns
    label = (mlp.compress(h_q, step=0) * gate).reshape(b, n_q, 1, e)
    zeros = Tensor(np.zeros((b, n_q, d, e), dtype=h_q.data.dtype))
    feats = zeros + marker * gate
    return T.concat([feats, label], axis=-2)


class PFNBlock(Module):
    """Feature attention, datapoint attention, FFN; each pre-norm residual."""

    def __init__(self, cfg: BlockConfig, rng):
        d = cfg.model_dim
        self.cfg = cfg
        self.ln1_g = make_param((d,), "ones", rng)
        self.ln1_b = make_param((d,), "zeros", rng)
        self.feat_attn = MultiHeadAttention(cfg, rng)
        self.ln2_g = make_param((d,), "ones", rng)
        self.ln2_b = make_param((d,), "zeros", rng)
        self.data_attn = MultiHeadAttention(cfg, rng)
        self.ln3_g = make_param((d,), "ones", rng)
        self.ln3_b = make_param((d,), "zeros", rng)
        self.ffn_in = Linear(d, cfg.ffn_dim, rng)
        self.ffn_out = Linear(cfg.ffn_dim, d, rng)

    def __call__(self, grid, row_mask: AttentionMask, train=False, rng=None, tag=""):
        # grid [B, n_rows, d+1, E]; feature attention runs over the cell axis
        cols = grid.shape[-2]
        a = self.feat_attn(
            T.layer_norm(grid, self.ln1_g, self.ln1_b),
            AttentionMask.full(cols),
            train=train,
            rng=rng,
            tag=f"{tag}feat",
        )
        grid = grid + a

        # datapoint attention runs over the row axis, one column at a time
        t = T.layer_norm(grid, self.ln2_g, self.ln2_b).transpose((0, 2, 1, 3))
        d = self.data_attn(t, row_mask, train=train, rng=rng, tag=f"{tag}data")
        grid = grid + d.transpose((0, 2, 1, 3))

        hid = T.gelu(self.ffn_in(T.layer_norm(grid, self.ln3_g, self.ln3_b)))
        hid = T.dropout(hid, self.cfg.dropout, rng, train)
        return grid + self.ffn_out(hid)


class PFNModel(Module):
    def __init__(
        self,
        *,
        recurrence: RecurrenceConfig,
        rng,
        n_layers=3,
        model_dim=96,
        n_heads=4,
        ffn_dim=192,
        n_classes=2,
        dropout=0.0,
        feedback_hidden=None,
        max_columns=64,
        repeats=1,
    ):
        if n_classes < 2:
            raise ValueError("classification needs n_classes >= 2")
        if repeats < 1:
            raise ValueError("repeats must be >= 1")
        cfg = BlockConfig(model_dim=model_dim, n_heads=n_heads, ffn_dim=ffn_dim,
                          dropout=dropout)
        e = model_dim
        self.n_classes = n_classes
        self.max_columns = max_columns
        self.recurrence = recurrence
        self.repeats = repeats

        self.feat_w = make_param((e,), ("normal", 0.0, 0.02), rng)
        self.feat_b = make_param((e,), "zeros", rng)
        self.label_embed = make_param((n_classes, e), ("normal", 0.0, 0.02), rng)
        self.unknown_label = make_param((e,), ("normal", 0.0, 0.02), rng)
        self.blocks = [PFNBlock(cfg, rng) for _ in range(n_layers)]
        self.marker = make_param((e,), ("normal", 0.0, 0.02), rng)
        self.gate_raw = make_param((), ("constant", 2.0), rng)
        self.feedback = FeedbackMLP(e, feedback_hidden or e, rng, max_steps=0)
        self.dec1 = Linear(e, e, rng)
        self.dec2 = Linear(e, n_classes, rng)

    # -- encoding -----------------------------------------------------------

    def encode(self, batch: TaskBatch) -> Tensor:
        """Raw batch -> cell grid [B, n_c+n_q, d+1, E]. Features standardized
        per column with context-row statistics; label cells hold the embedded
        context label or the learned unknown-label vector for query rows."""
        if batch.kind != "classification":
            raise ValueError("this model handles classification tasks only")
        b, n, d = batch.x.shape
        if d > self.max_columns:
            raise ValueError(f"{d} feature columns exceed configured maximum "
                             f"{self.max_columns}")
        n_c = batch.n_context
        ctx = batch.x[:, :n_c]
        mu = ctx.mean(axis=1)
        sd = np.sqrt(ctx.var(axis=1) + CELL_STD_EPS)
        std = (batch.x - mu[:, None, :]) / sd[:, None, :]

        dt = T.default_dtype()
        cells = Tensor(std[..., None].astype(dt)) * self.feat_w + self.feat_b
        ctx_lab = T.index_select(self.label_embed, 0, batch.y_context.reshape(-1))
        ctx_lab = ctx_lab.reshape(b, n_c, ctx_lab.shape[-1])
        pad = Tensor(np.zeros((b, n - n_c, ctx_lab.shape[-1]), dtype=dt))
        labels = T.concat([ctx_lab, pad + self.unknown_label], axis=-2)
        labels = labels.reshape(b, n, 1, labels.shape[-1])
        return T.concat([cells, labels], axis=-2)

    # -- forward ------------------------------------------------------------

    def _stack_pass(self, grid, groups, pass_index, train, rng):
        mask = AttentionMask.from_groups(groups, DEFAULT_GROUP_RULE)
        try:
            for rep in range(self.repeats):
                prefix = (f"pass{pass_index}." if self.repeats == 1
                          else f"pass{pass_index}.rep{rep}.")
                for i, block in enumerate(self.blocks):
                    grid = block(grid, mask, train=train, rng=rng,
                                 tag=f"{prefix}block{i}.")
            T.check_finite(grid, f"recurrence pass {pass_index}")
        except T.NumericError as err:
            raise T.NumericError(f"recurrence pass {pass_index}: {err}") from err
        return grid

    def forward(self, batch: TaskBatch, n_rec, train=False, rng=None,
                gate_override=None):
        """Query logits [B, n_q, n_classes]."""
        grid0 = self.encode(batch)
        b, n0, cols, e = grid0.shape
        n_c = batch.n_context
        n_q = n0 - n_c
        base_groups = ["context"] * n_c + ["query"] * n_q

        h0 = self._stack_pass(grid0, base_groups, 0, train, rng)
        if n_rec == 0:
            h_out = h0
        else:
            if gate_override is None:
                gate = T.tanh(self.gate_raw)
            else:
                gate = Tensor(np.asarray(gate_override, dtype=T.default_dtype()))
            row_blocks = [grid0]
            h_prev = h0
            for r in range(1, n_rec + 1):
                h_q = h_prev[:, n_c:n0, -1, :]
                row_blocks.append(
                    build_feedback_rows(h_q, self.feedback, self.marker, gate,
                                        cols - 1)
                )
                groups = base_groups + ["feedback"] * (r * n_q)
                h_prev = self._stack_pass(
                    T.concat(row_blocks, axis=-3), groups, r, train, rng
                )
            h_r = h_prev[:, :n0]
            h_out = h0 + (h_r - h0) * gate

        dec_in = h_out[:, n_c:n0, -1, :]
        return self.dec2(T.gelu(self.dec1(dec_in)))

    # -- training / evaluation ----------------------------------------------

    def loss_on_batch(self, batch, rng=None, n_rec=None, train=True):
        if not isinstance(batch, TaskBatch):
            batch = stack_tasks(batch)
        if batch.y_query is None:
            raise ValueError("loss needs query targets")
        n = self.recurrence.n_train if n_rec is None else n_rec
        logits = self.forward(batch, n, train=train, rng=rng)
        return cross_entropy(logits, batch.y_query)

    def predict_proba(self, task, n_rec=None):
        n = self.recurrence.n_eval if n_rec is None else n_rec
        batch = task if isinstance(task, TaskBatch) else stack_tasks([task])
        with T.no_grad():
            probs = T.softmax(self.forward(batch, n), axis=-1)
        return probs.data[0] if not isinstance(task, TaskBatch) else probs.data

    def predict(self, task, n_rec=None):
        return np.argmax(self.predict_proba(task, n_rec), axis=-1)
