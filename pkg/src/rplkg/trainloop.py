"""Seeded training of the selector projections on k-shot tasks.

Plain SGD with decoupled weight decay and cosine learning-rate decay,
plus an exhaustive hyperparameter grid search over weight decay, Gumbel
temperature, dropout, and the blend alpha.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import selector
from .baselines import zeroshot_scores
from .embedstore import EmbeddingCache
from .errors import RplkgError, ValidationError
from .evalharness import FewShotTask, accuracy
from .selector import PromptBlock, SelectorParams

WEIGHT_DECAY_GRID = (3e-3, 1e-2, 5e-2, 0.1)
TAU_GRID = (0.001, 0.01, 0.1)
DROPOUT_GRID = (0.1, 0.3, 0.5, 0.7)
ALPHA_GRID = (0.1, 0.3, 0.5, 0.7, 1.0)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    tau: float = 0.01
    dropout: float = 0.0
    alpha_blend: float = 1.0
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    mode: str = "hard"
    logit_scale: float = 100.0

    def __post_init__(self):
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValidationError("learning_rate and weight_decay must be >= 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValidationError("batch_size and epochs must be >= 1")


@dataclass
class TrainResult:
    params: SelectorParams
    loss_trace: list[float]
    train_acc_trace: list[float]
    val_acc_trace: list[float]
    seconds_total: float
    seconds_per_iter: float

    @property
    def final_train_acc(self) -> float:
        return self.train_acc_trace[-1]

    @property
    def final_val_acc(self) -> float:
        return self.val_acc_trace[-1]


def _eval_acc(params, X, y, block, alpha_blend, zs):
    scores, _ = selector.score(params, X, block, alpha_blend=alpha_blend, zeroshot_scores=zs)
    return accuracy(scores, y)


def train(config: TrainConfig, task: FewShotTask, image_cache: EmbeddingCache,
          block: PromptBlock, template_block: Optional[PromptBlock] = None) -> TrainResult:
    """Optimize W_q, W_k, W_v on the task's train split.

    Fully deterministic given (config, task, caches): the shuffle order,
    Gumbel noise, and dropout masks all derive from config.seed.
    """
    train_idx = task.train_indices
    if train_idx.size == 0:
        raise ValidationError("task has an empty train split")
    if train_idx.max() >= image_cache.count:
        raise ValidationError("task indices out of range for the image cache")
    X_train = image_cache.vectors[train_idx]
    y_train = image_cache.labels[train_idx]
    val_idx = task.val_indices if task.val_indices.size else train_idx
    X_val = image_cache.vectors[val_idx]
    y_val = image_cache.labels[val_idx]

    zs_train = zs_val = None
    if config.alpha_blend < 1.0:
        if template_block is None:
            raise ValidationError("alpha_blend < 1 requires a template cache")
        zs_train = zeroshot_scores(X_train, template_block)
        zs_val = zeroshot_scores(X_val, template_block)

    params = selector.init_params(block.dim, tau=config.tau, seed=config.seed,
                                  dropout_rate=config.dropout, logit_scale=config.logit_scale)
    n = train_idx.size
    steps_per_epoch = (n + config.batch_size - 1) // config.batch_size
    total_steps = config.epochs * steps_per_epoch
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([config.seed & 0xFFFFFFFF, 0x5F]))

    loss_trace, train_accs, val_accs = [], [], []
    t0 = time.perf_counter()
    step = 0
    for _ in range(config.epochs):
        order = shuffle_rng.permutation(n)
        for b in range(steps_per_epoch):
            sel = order[b * config.batch_size:(b + 1) * config.batch_size]
            noise = selector.batch_noise(config.seed, step, sel.size,
                                         block.n_classes, block.max_prompts)
            loss, _, grads = selector.forward_backward(
                params, X_train[sel], y_train[sel], block, noise=noise,
                mode=config.mode, alpha_blend=config.alpha_blend,
                zeroshot_scores=None if zs_train is None else zs_train[sel],
                dropout_seed=(config.seed * 1_000_003 + step) if config.dropout > 0 else None,
                want_grads=True)
            if not np.isfinite(loss):
                raise RplkgError(f"training diverged at step {step}: loss={loss}")
            lr_t = config.learning_rate * 0.5 * (1 + np.cos(np.pi * step / max(total_steps, 1)))
            for name in ("w_q", "w_k", "w_v"):
                w = getattr(params, name)
                if config.weight_decay > 0:
                    w *= 1.0 - lr_t * config.weight_decay
                w -= lr_t * getattr(grads, name)
            step += 1
        # epoch loss is the deterministic (hard, noise-free) loss, so the
        # trace is constant whenever the parameters are
        epoch_loss, _ = selector.forward_loss(
            params, X_train, y_train, block, mode="hard",
            alpha_blend=config.alpha_blend, zeroshot_scores=zs_train)
        loss_trace.append(float(epoch_loss))
        train_accs.append(_eval_acc(params, X_train, y_train, block, config.alpha_blend, zs_train))
        val_accs.append(_eval_acc(params, X_val, y_val, block, config.alpha_blend, zs_val))
    seconds = time.perf_counter() - t0
    return TrainResult(params=params, loss_trace=loss_trace,
                       train_acc_trace=train_accs, val_acc_trace=val_accs,
                       seconds_total=seconds, seconds_per_iter=seconds / max(step, 1))


@dataclass
class GridCell:
    config: TrainConfig
    val_accuracy: float
    seconds: float


def grid_search(task: FewShotTask, image_cache: EmbeddingCache, block: PromptBlock,
                template_block: Optional[PromptBlock] = None,
                base_config: Optional[TrainConfig] = None,
                weight_decays=WEIGHT_DECAY_GRID, taus=TAU_GRID,
                dropouts=(0.0,), alphas=(1.0,)) -> tuple[TrainConfig, list[GridCell]]:
    """Exhaustive product over the grids, ranked by validation accuracy.

    Ties break toward lower weight decay, then lower temperature.
    Returns (best config, full leaderboard).
    """
    if not (weight_decays and taus and dropouts and alphas):
        raise ValidationError("all grids must be non-empty")
    base = base_config or TrainConfig()
    cells = []
    for wd, tau, dr, ab in itertools.product(weight_decays, taus, dropouts, alphas):
        cfg = replace(base, weight_decay=wd, tau=tau, dropout=dr, alpha_blend=ab)
        result = train(cfg, task, image_cache, block, template_block)
        cells.append(GridCell(config=cfg, val_accuracy=result.final_val_acc,
                              seconds=result.seconds_total))
    cells.sort(key=lambda c: (-c.val_accuracy, c.config.weight_decay, c.config.tau))
    return cells[0].config, cells


def leaderboard_csv(cells: list[GridCell]) -> str:
    """Config columns + val_accuracy + seconds, one row per grid cell."""
    lines = ["weight_decay,tau,dropout,alpha_blend,learning_rate,epochs,batch_size,seed,"
             "val_accuracy,seconds"]
    for c in cells:
        cfg = c.config
        lines.append(f"{cfg.weight_decay},{cfg.tau},{cfg.dropout},{cfg.alpha_blend},"
                     f"{cfg.learning_rate},{cfg.epochs},{cfg.batch_size},{cfg.seed},"
                     f"{c.val_accuracy},{c.seconds}")
    return "\n".join(lines) + "\n"
