"""Optimizer, schedule, and the generic fit loop.

AdamW uses decoupled weight decay; the schedule is cosine annealing to zero
with optional linear warmup. Early stopping tracks the validation metric with
strict improvement and restores the best weights before returning. Everything
is deterministic given the seed: shuffling, dropout, and batch order all derive
from it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T


class ConfigError(ValueError):
    """Invalid run configuration (maps to CLI exit code 2)."""


class TrainingAbort(RuntimeError):
    """Non-finite loss or gradient during training (maps to CLI exit code 3)."""


@dataclass
class OptimConfig:
    lr: float = 3e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 128
    max_epochs: int = 100
    patience: int = 10
    clip_norm: float | None = None
    warmup_steps: int = 0

    def validate(self):
        if self.lr <= 0:
            raise ConfigError("optim.lr must be > 0")
        if self.patience < 1:
            raise ConfigError("optim.patience must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("optim.batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("optim.max_epochs must be >= 1")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ConfigError("optim.betas must be in [0, 1)")
        if self.warmup_steps < 0:
            raise ConfigError("optim.warmup_steps must be >= 0")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("optim.clip_norm must be > 0 when set")
        return self


def cosine_lr(step, total_steps, base_lr, warmup_steps=0):
    """Linear warmup to base_lr, then half-cosine decay to exactly 0."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min(max(step - warmup_steps, 0) / span, 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_global_norm(grads, max_norm):
    """Scale the whole gradient dict so its global L2 norm is <= max_norm.
    Returns (grads, pre-clip norm); grads are scaled in place."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * scale
    return grads, norm


class AdamW:
    def __init__(self, params, cfg: OptimConfig):
        self.params = dict(params)
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, grads, lr):
        cfg = self.cfg
        self.t += 1
        bc1 = 1.0 - cfg.beta1**self.t
        bc2 = 1.0 - cfg.beta2**self.t
        for name, p in self.params.items():
            g = grads[name]
            if not np.all(np.isfinite(g)):
                raise TrainingAbort(f"non-finite gradient for parameter '{name}'")
            m = self.m[name] = cfg.beta1 * self.m[name] + (1.0 - cfg.beta1) * g
            v = self.v[name] = cfg.beta2 * self.v[name] + (1.0 - cfg.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
            p.data = p.data - lr * (update + cfg.weight_decay * p.data)


@dataclass
class FitResult:
    history: list = field(default_factory=list)
    best_val: float = math.nan
    best_epoch: int = -1
    steps: int = 0
    stopped_early: bool = False


def _batches(n, batch_size, rng):
    idx = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield idx[start : start + batch_size]


def fit(
    model,
    train_data,
    val_data,
    cfg: OptimConfig,
    seed,
    *,
    loss_fn,
    val_fn,
    val_mode="min",
    steps_per_epoch=None,
    history_path=None,
):
    """Train `model` with AdamW + cosine schedule and early stopping.

    `train_data` is either a list of examples (shuffled into batches each
    epoch) or a sampler with .sample(rng, n) -> list (fresh tasks per batch;
    needs steps_per_epoch). loss_fn(model, batch, rng) -> scalar Tensor;
    val_fn(model, val_data) -> float. One history row per epoch.
    """
    cfg.validate()
    if val_mode not in ("min", "max"):
        raise ConfigError("val_mode must be 'min' or 'max'")
    params = model.parameters()
    opt = AdamW(params, cfg)
    shuffle_rng = np.random.default_rng([seed, 0])
    drop_rng = np.random.default_rng([seed, 1])

    streaming = not hasattr(train_data, "__len__")
    if streaming:
        if steps_per_epoch is None:
            raise ConfigError("steps_per_epoch required for sampled training data")
        n_steps_epoch = steps_per_epoch
    else:
        n_steps_epoch = max(1, math.ceil(len(train_data) / cfg.batch_size))
    total_steps = cfg.max_epochs * n_steps_epoch

    result = FitResult()
    best_state = None
    best = None
    bad_epochs = 0
    step = 0
    sign = 1.0 if val_mode == "max" else -1.0

    for epoch in range(cfg.max_epochs):
        losses = []
        lr = cfg.lr
        if streaming:
            batch_iter = (
                train_data.sample(shuffle_rng, cfg.batch_size)
                for _ in range(n_steps_epoch)
            )
        else:
            batch_iter = (
                [train_data[i] for i in sel]
                for sel in _batches(len(train_data), cfg.batch_size, shuffle_rng)
            )
        for batch in batch_iter:
            lr = cosine_lr(step, total_steps, cfg.lr, cfg.warmup_steps)
            loss = loss_fn(model, batch, drop_rng)
            lval = float(loss.data)
            if not math.isfinite(lval):
                raise TrainingAbort(f"non-finite loss at epoch {epoch} step {step}")
            grads = T.gradients(loss, params)
            if cfg.clip_norm is not None:
                clip_global_norm(grads, cfg.clip_norm)
            opt.step(grads, lr)
            losses.append(lval)
            step += 1

        val = float(val_fn(model, val_data))
        result.history.append(
            {
                "step": step,
                "epoch": epoch,
                "train_loss": float(np.mean(losses)),
                "val_metric": val,
                "lr": lr,
            }
        )
        if best is None or sign * val > sign * best:
            best = val
            best_state = model.state_dict()
            result.best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                result.stopped_early = True
                break

    if best_state is not None:
        model.load_state_dict(best_state)
    result.best_val = best if best is not None else math.nan
    result.steps = step

    if history_path is not None:
        with open(history_path, "w") as fh:
            for row in result.history:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    return result
