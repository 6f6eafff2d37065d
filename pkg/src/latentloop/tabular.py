"""Three-stage tabular in-context learner.

A table is embedded cell by cell (scalar value through a shared linear map,
plus a learned per-column embedding). A one-layer column transformer attends
across rows within each column, a one-layer row transformer attends across the
d+1 cells of each row and mean-pools them into one vector per row, and a
deeper ICL transformer attends across rows to predict query labels. Latent
feedback recurrence applies only at the ICL stage; the first two stages run
once per task and their output is reused across recurrence passes.

A single learned scalar gate g = tanh(g_raw), g_raw initialized at 2.0, scales
the feedback tokens and blends the first ICL pass with the final one at the
query positions, h_first + g * (h_final - h_first), so the optimizer can dial
the recurrent contribution up or down as one knob. With zero recurrences the
gate never enters the computation and the forward equals the plain stack.

The label column carries the embedded context label for context rows and a
learned placeholder for query rows. Masking keeps query rows from seeing each
other directly: context rows attend context rows, query rows attend context
plus feedback rows, feedback rows attend everything.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import DEFAULT_GROUP_RULE, AttentionMask, StackConfig, TransformerStack
from .recurrence import FeedbackMLP, RecurrenceConfig, run_recurrence, select_queries
from .tensor import Module, Tensor, make_param
from .training import ConfigError

LABEL_STD_EPS = 1e-8


@dataclass
class TabularTask:
    x_context: np.ndarray  # [n_c, d]
    y_context: np.ndarray  # [n_c]
    x_query: np.ndarray  # [n_q, d]
    kind: str  # "classification" | "regression"
    n_classes: int = 0
    y_query: np.ndarray = None  # optional targets for evaluation

    def __post_init__(self):
        self.x_context = np.asarray(self.x_context, dtype=np.float64)
        self.x_query = np.asarray(self.x_query, dtype=np.float64)
        if self.x_context.ndim != 2 or self.x_query.ndim != 2:
            raise ValueError("features must be 2-d matrices")
        if self.x_context.shape[1] != self.x_query.shape[1]:
            raise ValueError("context and query feature widths differ")
        if self.d < 1 or self.n_context < 1 or self.n_query < 1:
            raise ValueError("need d >= 1, n_c >= 1, n_q >= 1")
        if self.kind == "classification":
            self.y_context = np.asarray(self.y_context, dtype=np.int64)
            if self.n_classes < 2:
                raise ValueError("classification needs n_classes >= 2")
            if self.y_context.min() < 0 or self.y_context.max() >= self.n_classes:
                raise ValueError("class ids out of range")
        elif self.kind == "regression":
            self.y_context = np.asarray(self.y_context, dtype=np.float64)
        else:
            raise ValueError(f"unknown task kind: {self.kind!r}")
        if self.y_context.shape != (self.n_context,):
            raise ValueError("y_context must have one label per context row")

    @property
    def d(self):
        return self.x_context.shape[1]

    @property
    def n_context(self):
        return self.x_context.shape[0]

    @property
    def n_query(self):
        return self.x_query.shape[0]


@dataclass
class TaskBatch:
    x: np.ndarray  # [B, n_c + n_q, d]
    y_context: np.ndarray  # [B, n_c]
    n_context: int
    kind: str
    n_classes: int
    y_query: np.ndarray = None  # [B, n_q] when present

    @property
    def n_query(self):
        return self.x.shape[1] - self.n_context


def stack_tasks(tasks) -> TaskBatch:
    """Batch same-shaped tasks; context rows first, then query rows."""
    first = tasks[0]
    for t in tasks[1:]:
        if (
            t.d != first.d
            or t.n_context != first.n_context
            or t.n_query != first.n_query
            or t.kind != first.kind
            or t.n_classes != first.n_classes
        ):
            raise ValueError("all tasks in a batch must share shape and kind")
    x = np.stack([np.concatenate([t.x_context, t.x_query]) for t in tasks])
    y_c = np.stack([t.y_context for t in tasks])
    y_q = None
    if all(t.y_query is not None for t in tasks):
        y_q = np.stack([np.asarray(t.y_query) for t in tasks])
    return TaskBatch(
        x=x,
        y_context=y_c,
        n_context=first.n_context,
        kind=first.kind,
        n_classes=first.n_classes,
        y_query=y_q,
    )


# -- losses -------------------------------------------------------------------


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean of -log softmax(logits)[target] over all leading dims."""
    targets = np.asarray(targets, dtype=np.int64)
    lse = T.logsumexp(logits, axis=-1, keepdims=True)
    picked = T.take_along(logits, targets[..., None], axis=-1)
    return (lse - picked).mean()


def rmse_loss(pred: Tensor, targets) -> Tensor:
    """sqrt(mean squared error) with a gradient that stays finite at 0."""
    y = Tensor(np.asarray(targets, dtype=pred.data.dtype))
    d = pred - y
    return T.safe_sqrt((d * d).mean())


def tabular_loss(predictions: Tensor, targets, kind) -> Tensor:
    if np.asarray(targets).size == 0:
        raise ValueError("empty query set")
    if kind == "classification":
        return cross_entropy(predictions, targets)
    if kind == "regression":
        return rmse_loss(predictions, targets)
    raise ValueError(f"unknown task kind: {kind!r}")


# -- model --------------------------------------------------------------------


class ThreeStageModel(Module):
    def __init__(
        self,
        *,
        kind,
        icl_cfg: StackConfig,
        recurrence: RecurrenceConfig,
        rng,
        n_classes=0,
        max_columns=64,
        feedback_hidden=None,
    ):
        if kind not in ("classification", "regression"):
            raise ValueError(f"unknown task kind: {kind!r}")
        if kind == "classification" and n_classes < 2:
            raise ValueError("classification needs n_classes >= 2")
        d = icl_cfg.block.model_dim
        self.kind = kind
        self.n_classes = n_classes
        self.max_columns = max_columns
        self.recurrence = recurrence

        self.cell_w = make_param((d,), ("normal", 0.0, 0.02), rng)
        self.cell_b = make_param((d,), "zeros", rng)
        self.col_embed = make_param((max_columns, d), ("normal", 0.0, 0.02), rng)
        self.label_col_embed = make_param((d,), ("normal", 0.0, 0.02), rng)
        self.no_label = make_param((d,), ("normal", 0.0, 0.02), rng)
        if kind == "classification":
            self.label_embed = make_param((n_classes, d), ("normal", 0.0, 0.02), rng)
            head_out = n_classes
        else:
            self.label_w = make_param((d,), ("normal", 0.0, 0.02), rng)
            self.label_b = make_param((d,), "zeros", rng)
            head_out = 1

        one_block = StackConfig.plain(1, icl_cfg.block)
        self.col_stage = TransformerStack(one_block, rng)
        self.row_stage = TransformerStack(one_block, rng)
        self.icl_stage = TransformerStack(icl_cfg, rng)
        self.feedback = FeedbackMLP(
            d, feedback_hidden or d, rng, max_steps=recurrence.max_step_embeddings
        )
        self.gate_raw = make_param((), ("constant", 2.0), rng)
        self.head_w = make_param((d, head_out), ("normal", 0.0, 0.02), rng)
        self.head_b = make_param((head_out,), "zeros", rng)

    # -- label statistics (regression) --------------------------------------

    def _label_stats(self, y_context):
        mu = y_context.mean(axis=-1)
        sd = np.sqrt(y_context.var(axis=-1) + LABEL_STD_EPS)
        return mu, sd

    # -- stage 0: cell embedding --------------------------------------------

    def embed_table(self, batch: TaskBatch) -> Tensor:
        """Cell tokens [B, n_c+n_q, d+1, E]; label column last."""
        b, n, d = batch.x.shape
        if d > self.max_columns:
            raise ConfigError(
                f"{d} feature columns exceed configured maximum {self.max_columns}"
            )
        dt = T.default_dtype()
        x = Tensor(batch.x[..., None].astype(dt))  # [B, n, d, 1]
        cells = x * self.cell_w + self.cell_b
        cells = cells + T.index_select(self.col_embed, 0, np.arange(d))

        n_c = batch.n_context
        if self.kind == "classification":
            flat = batch.y_context.reshape(-1)
            ctx_lab = T.index_select(self.label_embed, 0, flat)
            ctx_lab = ctx_lab.reshape(b, n_c, ctx_lab.shape[-1])
        else:
            mu, sd = self._label_stats(batch.y_context)
            y_std = (batch.y_context - mu[:, None]) / sd[:, None]
            ctx_lab = Tensor(y_std[..., None].astype(dt)) * self.label_w + self.label_b
        e = ctx_lab.shape[-1]
        pad = Tensor(np.zeros((b, n - n_c, e), dtype=dt))
        labels = T.concat([ctx_lab, pad + self.no_label], axis=-2)
        labels = labels + self.label_col_embed
        labels = labels.reshape(b, n, 1, e)
        return T.concat([cells, labels], axis=-2)

    # -- stages 1-2: column then row attention --------------------------------

    def col_row_pass(self, tokens: Tensor, n_context: int, train=False, rng=None) -> Tensor:
        """[B, n, d+1, E] cell tokens -> [B, n, E] row embeddings."""
        b, n, cols, e = tokens.shape
        groups = ["context"] * n_context + ["query"] * (n - n_context)
        col_mask = AttentionMask.from_groups(groups, DEFAULT_GROUP_RULE)
        per_col = tokens.transpose((0, 2, 1, 3)).reshape(b * cols, n, e)
        per_col = self.col_stage(per_col, col_mask, train=train, rng=rng, tag="col.")
        tokens = per_col.reshape(b, cols, n, e).transpose((0, 2, 1, 3))

        per_row = tokens.reshape(b * n, cols, e)
        per_row = self.row_stage(
            per_row, AttentionMask.full(cols), train=train, rng=rng, tag="row."
        )
        return per_row.mean(axis=-2).reshape(b, n, e)

    # -- stage 3: ICL with recurrence -----------------------------------------

    def icl_predict(self, row_emb: Tensor, batch: TaskBatch, n_rec, train=False, rng=None):
        n = row_emb.shape[-2]
        n_c = batch.n_context
        n_q = n - n_c
        q_pos = np.arange(n_c, n)
        base = ["context"] * n_c + ["query"] * n_q

        def mask_for(r):
            return AttentionMask.from_groups(
                base + ["feedback"] * (r * n_q), DEFAULT_GROUP_RULE
            )

        gate = T.tanh(self.gate_raw) if n_rec > 0 else None
        h, trace = run_recurrence(
            stack=self.icl_stage,
            feedback=self.feedback,
            e0=row_emb,
            query_positions=q_pos,
            mask_for=mask_for,
            n_recurrences=n_rec,
            train=train,
            rng=rng,
            tag="icl.",
            gate=gate,
        )
        h_q = select_queries(h, q_pos)
        if n_rec > 0:
            h_q_first = select_queries(trace.h_first, q_pos)
            h_q = h_q_first + (h_q - h_q_first) * gate
        out = h_q @ self.head_w + self.head_b
        if self.kind == "regression":
            mu, sd = self._label_stats(batch.y_context)
            dt = T.default_dtype()
            out = out.reshape(out.shape[:-1])  # [B, n_q]
            out = out * Tensor(sd[:, None].astype(dt)) + Tensor(mu[:, None].astype(dt))
        return out

    def forward(self, batch: TaskBatch, n_rec, train=False, rng=None):
        """Logits [B, n_q, n_classes] or de-standardized predictions [B, n_q]."""
        tokens = self.embed_table(batch)
        row_emb = self.col_row_pass(tokens, batch.n_context, train=train, rng=rng)
        return self.icl_predict(row_emb, batch, n_rec, train=train, rng=rng)

    # -- training / evaluation -------------------------------------------------

    def loss_on_batch(self, batch, rng=None, n_rec=None, train=True):
        if not isinstance(batch, TaskBatch):
            batch = stack_tasks(batch)
        if batch.y_query is None:
            raise ValueError("loss needs query targets")
        n = self.recurrence.n_train if n_rec is None else n_rec
        pred = self.forward(batch, n, train=train, rng=rng)
        return tabular_loss(pred, batch.y_query, self.kind)

    def predict(self, task: TabularTask, n_rec=None):
        """Class ids [n_q] for classification, scalars [n_q] for regression."""
        n = self.recurrence.n_eval if n_rec is None else n_rec
        batch = stack_tasks([task])
        with T.no_grad():
            out = self.forward(batch, n)
        if self.kind == "classification":
            return np.argmax(out.data[0], axis=-1)
        return out.data[0]

    def predict_proba(self, task: TabularTask, n_rec=None):
        if self.kind != "classification":
            raise ValueError("probabilities only defined for classification")
        n = self.recurrence.n_eval if n_rec is None else n_rec
        batch = stack_tasks([task])
        with T.no_grad():
            out = self.forward(batch, n)
            probs = T.softmax(out, axis=-1)
        return probs.data[0]
