"""Patch-based quantile forecaster with channel-independent attention.

Each channel of a context window is standardized (its own context mean/std),
cut into non-overlapping patches, and linearly embedded. Learned query tokens
stand in for the future patches; the transformer runs over [context patches |
query tokens] with a full attention mask, optionally with latent feedback
recurrence, and a linear head decodes every query token into patch_size values
per quantile. Outputs are de-standardized, so the pipeline is exactly
shift-equivariant per channel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import AttentionMask, BlockConfig, StackConfig, TransformerStack
from .recurrence import FeedbackMLP, RecurrenceConfig, run_recurrence, select_queries
from .tensor import Module, Tensor, make_param

QUANTILE_LEVELS = (0.1, 0.3, 0.5, 0.7, 0.9)
MEDIAN_INDEX = 2
STD_EPS = 1e-8


@dataclass
class ForecastTask:
    context: np.ndarray  # [T, C]
    horizon: int

    def __post_init__(self):
        self.context = np.asarray(self.context, dtype=np.float64)
        if self.context.ndim == 1:
            self.context = self.context[:, None]
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


@dataclass
class QuantileForecast:
    values: np.ndarray  # [C, horizon, Q]
    levels: tuple = QUANTILE_LEVELS

    @property
    def median(self):
        return self.values[..., MEDIAN_INDEX]


def split_patches(series, patch_size):
    """[T, C] -> [C, T/patch_size, patch_size]; T must divide evenly."""
    series = np.asarray(series)
    t, c = series.shape
    if t % patch_size != 0:
        raise ValueError(f"context length {t} not divisible by patch size {patch_size}")
    return series.T.reshape(c, t // patch_size, patch_size)


def query_token_count(horizon, patch_size):
    return math.ceil(horizon / patch_size)


def crossing_rate(values):
    """Fraction of adjacent quantile pairs that decrease (diagnostic only)."""
    diffs = np.diff(values, axis=-1)
    return float((diffs < 0).mean())


def pinball_loss(pred: Tensor, target, levels=QUANTILE_LEVELS) -> Tensor:
    """Mean over every (…, step, quantile) of the tilted absolute error."""
    target = target.data if isinstance(target, Tensor) else np.asarray(target)
    y = Tensor(np.asarray(target, dtype=pred.data.dtype)[..., None])
    tau = Tensor(np.asarray(levels, dtype=pred.data.dtype))
    u = y - pred
    return T.where(u.data >= 0, u * tau, u * (tau - 1.0)).mean()


def mse_of_median(pred: Tensor, target) -> Tensor:
    target = target.data if isinstance(target, Tensor) else np.asarray(target)
    med = pred[..., MEDIAN_INDEX]
    d = med - Tensor(np.asarray(target, dtype=pred.data.dtype))
    return (d * d).mean()


class TSForecaster(Module):
    def __init__(
        self,
        *,
        patch_size,
        max_context_patches,
        max_query_patches,
        stack_cfg: StackConfig,
        recurrence: RecurrenceConfig,
        rng,
        feedback_hidden=None,
        train_loss="pinball",
    ):
        d = stack_cfg.block.model_dim
        if train_loss not in ("pinball", "mse"):
            raise ValueError("train_loss must be 'pinball' or 'mse'")
        self.patch_size = patch_size
        self.max_context_patches = max_context_patches
        self.max_query_patches = max_query_patches
        self.recurrence = recurrence
        self.train_loss = train_loss
        self.n_quantiles = len(QUANTILE_LEVELS)

        self.patch_proj = make_param((patch_size, d), ("normal", 0.0, 0.02), rng)
        self.patch_bias = make_param((d,), "zeros", rng)
        self.pos_embed = make_param(
            (max_context_patches + max_query_patches, d), ("normal", 0.0, 0.02), rng
        )
        self.query_tokens = make_param(
            (max_query_patches, d), ("normal", 0.0, 0.02), rng
        )
        self.stack = TransformerStack(stack_cfg, rng)
        self.feedback = FeedbackMLP(
            d, feedback_hidden or d, rng, max_steps=recurrence.max_step_embeddings
        )
        self.head_w = make_param(
            (d, patch_size * self.n_quantiles), ("normal", 0.0, 0.02), rng
        )
        self.head_b = make_param((patch_size * self.n_quantiles,), "zeros", rng)

    # -- embedding ---------------------------------------------------------

    def _standardize(self, contexts):
        """contexts [B, T, C] -> (standardized, mu [B, C], sd [B, C])."""
        mu = contexts.mean(axis=1)
        sd = np.sqrt(contexts.var(axis=1) + STD_EPS)
        std = (contexts - mu[:, None, :]) / sd[:, None, :]
        return std, mu, sd

    def embed(self, contexts_std, n_query):
        """Standardized contexts [B, T, C] -> token sequence [B*C, Np+n_q, D]."""
        b, t, c = contexts_std.shape
        n_p = t // self.patch_size
        if n_p > self.max_context_patches:
            raise ValueError(f"{n_p} context patches exceed max {self.max_context_patches}")
        if n_query > self.max_query_patches:
            raise ValueError(f"{n_query} query tokens exceed max {self.max_query_patches}")
        patches = np.stack(
            [split_patches(contexts_std[i], self.patch_size) for i in range(b)]
        )  # [B, C, Np, patch]
        flat = Tensor(
            patches.reshape(b * c, n_p, self.patch_size).astype(T.default_dtype())
        )
        tok = flat @ self.patch_proj + self.patch_bias
        tok = tok + T.index_select(self.pos_embed, 0, np.arange(n_p))
        q = T.index_select(self.query_tokens, 0, np.arange(n_query))
        q = q + T.index_select(self.pos_embed, 0, n_p + np.arange(n_query))
        q = q.reshape(1, n_query, q.shape[-1]) + Tensor(
            np.zeros((b * c, 1, 1), dtype=T.default_dtype())
        )
        return T.concat([tok, q], axis=-2)

    # -- forward -----------------------------------------------------------

    def forward_batch(self, contexts, horizon, n_rec, train=False, rng=None):
        """contexts [B, T, C] raw scale -> de-standardized forecasts
        Tensor [B, C, horizon, Q]."""
        contexts = np.asarray(contexts, dtype=np.float64)
        b, t, c = contexts.shape
        std, mu, sd = self._standardize(contexts)
        n_q = query_token_count(horizon, self.patch_size)
        e0 = self.embed(std, n_q)
        n_p = t // self.patch_size
        q_pos = np.arange(n_p, n_p + n_q)
        s0 = n_p + n_q

        h, _ = run_recurrence(
            stack=self.stack,
            feedback=self.feedback,
            e0=e0,
            query_positions=q_pos,
            mask_for=lambda r: AttentionMask.full(s0 + r * n_q),
            n_recurrences=n_rec,
            train=train,
            rng=rng,
        )
        h_q = select_queries(h, q_pos)  # [B*C, n_q, D]
        out = h_q @ self.head_w + self.head_b
        out = out.reshape(b * c, n_q, self.patch_size, self.n_quantiles)
        out = out.reshape(b * c, n_q * self.patch_size, self.n_quantiles)
        out = out[:, :horizon, :]
        dt = T.default_dtype()
        scale = Tensor(sd.reshape(-1, 1, 1).astype(dt))
        shift = Tensor(mu.reshape(-1, 1, 1).astype(dt))
        out = out * scale + shift
        return out.reshape(b, c, horizon, self.n_quantiles)

    def forecast(self, task: ForecastTask, n_rec=None) -> QuantileForecast:
        n = self.recurrence.n_eval if n_rec is None else n_rec
        with T.no_grad():
            vals = self.forward_batch(task.context[None], task.horizon, n)
        return QuantileForecast(values=vals.data[0])

    # -- training ----------------------------------------------------------

    def loss_on_batch(self, batch, rng, n_rec=None, train=True):
        """batch: list of (context [T, C], target [h, C]) at raw scale."""
        n = self.recurrence.n_train if n_rec is None else n_rec
        contexts = np.stack([ctx for ctx, _ in batch])
        targets = np.stack([y for _, y in batch])  # [B, h, C]
        horizon = targets.shape[1]
        pred = self.forward_batch(contexts, horizon, n, train=train, rng=rng)
        y = targets.transpose(0, 2, 1)  # [B, C, h]
        if self.train_loss == "mse":
            return mse_of_median(pred, y)
        return pinball_loss(pred, y)

    def eval_metrics(self, windows, n_rec=None):
        """Mean mse_of_median and pinball over (context, target) pairs."""
        n = self.recurrence.n_eval if n_rec is None else n_rec
        contexts = np.stack([ctx for ctx, _ in windows])
        targets = np.stack([y for _, y in windows]).transpose(0, 2, 1)
        with T.no_grad():
            pred = self.forward_batch(contexts, targets.shape[-1], n)
        return {
            "mse_median": float(mse_of_median(pred, targets).data),
            "pinball": float(pinball_loss(pred, targets).data),
            "quantile_crossing_rate": crossing_rate(pred.data),
        }
