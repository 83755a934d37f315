"""Phase-1 individual training and phase-2 group-head training."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import RatingDataset
from .groups import GroupSample, HFunction, aggregate_h, as_arrays
from .models import BaseModel, GroupModel, GroupSizeError
from .numkit import AdamState, ContractViolation, TrainingDiverged, adam_step

log = logging.getLogger(__name__)

MIN_DELTA = 1e-5


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 5
    validation_fraction: float = 0.1
    seed: int = 1
    h: HFunction = HFunction.MEAN

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must be in (0, 1)")
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("max_epochs and patience must be positive")
        object.__setattr__(self, "h", HFunction(self.h))


@dataclass
class TrainTrace:
    """Losses per epoch; epoch 0 is the untrained model."""

    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    batch_losses: list[list[tuple[int, float]]] = field(default_factory=list, repr=False)
    best_epoch: int = 0
    stop_reason: str = ""

    @property
    def final_epoch(self) -> int:
        return len(self.val_loss) - 1

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss"])
            for e, (tr, va) in enumerate(zip(self.train_loss, self.val_loss)):
                w.writerow([e, repr(tr), repr(va)])


@dataclass(frozen=True)
class StopDecision:
    stop: bool
    best_epoch: int
    reason: str = ""


def early_stop(val_losses: Sequence[float], patience: int, max_epochs: int | None = None,
               min_delta: float = MIN_DELTA) -> StopDecision:
    """Decide whether to stop after the last entry of ``val_losses``.

    Epochs are 1-based positions in the list. An epoch improves on the best so
    far only if it is lower by more than ``min_delta``.
    """
    if not val_losses:
        raise ValueError("need at least one validation loss")
    best, best_epoch, since = val_losses[0], 1, 0
    for epoch, loss in enumerate(val_losses[1:], start=2):
        if loss < best - min_delta:
            best, best_epoch, since = loss, epoch, 0
        else:
            since += 1
    n = len(val_losses)
    if since >= patience:
        return StopDecision(True, best_epoch, f"no improvement for {patience} epochs")
    if max_epochs is not None and n >= max_epochs:
        return StopDecision(True, best_epoch, "max_epochs")
    return StopDecision(False, best_epoch)


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, *stream])


def shuffle_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Deterministic permutation for one epoch."""
    return _rng(seed, 2, epoch).permutation(n)


def validation_split(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded ``(train_idx, val_idx)`` partition of ``range(n)``."""
    if n < 2:
        idx = np.arange(n)
        return idx, idx
    n_val = min(max(1, int(round(n * fraction))), n - 1)
    perm = _rng(seed, 1).permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _mae(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.abs(pred - target).mean())


def _fit(params: list[np.ndarray], step_fn: Callable, eval_fn: Callable, n_train: int,
         config: TrainConfig, on_improve: Callable[[], None] | None) -> TrainTrace:
    """Shared mini-batch loop with best-validation restore.

    ``step_fn(batch_idx)`` returns ``(loss, grads)`` for a batch;
    ``eval_fn(which)`` returns the MAE over "train" or "val".
    """
    trace = TrainTrace()
    state = AdamState.zeros_like(params)
    trace.train_loss.append(eval_fn("train"))
    trace.val_loss.append(eval_fn("val"))
    best = [p.copy() for p in params]
    best_val = trace.val_loss[0]
    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_order(n_train, config.seed, epoch)
        batches = []
        total = 0.0
        for start in range(0, n_train, config.batch_size):
            idx = order[start: start + config.batch_size]
            loss, grads = step_fn(idx)
            if not np.isfinite(loss):
                trace.stop_reason = "diverged"
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}: {trace}")
            adam_step(params, grads, state, config.lr)
            batches.append((len(idx), loss))
            total += loss * len(idx)
        trace.batch_losses.append(batches)
        trace.train_loss.append(total / n_train)
        val = eval_fn("val")
        trace.val_loss.append(val)
        if not np.isfinite(val):
            trace.stop_reason = "diverged"
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        if val < best_val - MIN_DELTA:
            best_val = val
            trace.best_epoch = epoch
            for b, p in zip(best, params):
                b[...] = p
            if on_improve is not None:
                on_improve()
        decision = early_stop(trace.val_loss, config.patience, config.max_epochs + 1)
        log.debug("epoch %d train %.5f val %.5f", epoch, trace.train_loss[-1], val)
        if decision.stop:
            trace.stop_reason = decision.reason
            break
    # Epoch 0 is a restore candidate too: never-improving runs keep the initial parameters.
    for b, p in zip(best, params):
        p[...] = b
    return trace


def train_individual(base: BaseModel, dataset: RatingDataset, config: TrainConfig = TrainConfig(),
                     on_improve: Callable[[BaseModel], None] | None = None) -> tuple[BaseModel, TrainTrace]:
    """Fit embeddings (and tower) to train ratings with MAE loss and Adam.

    A seeded fraction of the train split is held out for early stopping. The
    best-validation parameters are restored and the model is frozen.
    """
    if base.frozen:
        raise ContractViolation("base model is frozen")
    if len(dataset.train) == 0:
        raise ValueError("empty train split")
    if base.num_users != dataset.num_users or base.num_items != dataset.num_items:
        raise ValueError("model and dataset disagree on users/items")
    tr_idx, va_idx = validation_split(len(dataset.train), config.validation_fraction, config.seed)
    users, items, ratings = dataset.train.users, dataset.train.items, dataset.train.ratings
    parts = {"train": tr_idx, "val": va_idx}
    params = base.params()

    def eval_fn(which):
        idx = parts[which]
        return _mae(base.predict(users[idx], items[idx]), ratings[idx])

    def step_fn(batch):
        idx = tr_idx[batch]
        u, i = users[idx], items[idx]
        pred = base.predict(u, i)
        err = pred - ratings[idx]
        g = np.sign(err) / len(idx)
        gu, gi, tower = base.backward_vectors(g)
        gp = np.zeros(base.user_embeddings.shape)
        gq = np.zeros(base.item_embeddings.shape)
        np.add.at(gp, u, gu)
        np.add.at(gq, i, gi)
        return float(np.abs(err).mean()), [gp, gq, *tower]

    hook = (lambda: on_improve(base)) if on_improve else None
    trace = _fit(params, step_fn, eval_fn, len(tr_idx), config, hook)
    base.freeze()
    return base, trace


def group_labels(groups: Sequence[GroupSample], h: HFunction | str) -> np.ndarray:
    return np.array([aggregate_h(g.member_ratings, h) for g in groups], dtype=np.float64)


def train_group_head(model: GroupModel, groups: Sequence[GroupSample], config: TrainConfig = TrainConfig(),
                     on_improve: Callable[[GroupModel], None] | None = None) -> tuple[GroupModel, TrainTrace]:
    """Fit only the head so group predictions track ``h`` of member ratings.

    The base must already be frozen; its parameters are never touched.
    """
    if not model.base.frozen:
        raise ContractViolation("phase-2 training requires a frozen base")
    members, items, _ = as_arrays(groups)
    model.check_size(members.shape[1])
    if members.max() >= model.base.num_users or items.max() >= model.base.num_items:
        raise ValueError("group ids fall outside the model's user/item space")
    labels = group_labels(groups, config.h)
    tr_idx, va_idx = validation_split(len(groups), config.validation_fraction, config.seed)
    parts = {"train": tr_idx, "val": va_idx}
    params = model.head.params()

    def eval_fn(which):
        idx = parts[which]
        return _mae(model.predict(members[idx], items[idx]), labels[idx])

    def step_fn(batch):
        idx = tr_idx[batch]
        pred = model.predict(members[idx], items[idx])
        err = pred - labels[idx]
        ge, _, _ = model.base.backward_vectors(np.sign(err) / len(idx))
        return float(np.abs(err).mean()), model.head.backward_members(ge)

    hook = (lambda: on_improve(model)) if on_improve else None
    trace = _fit(params, step_fn, eval_fn, len(tr_idx), config, hook)
    return model, trace


__all__ = [
    "TrainConfig", "TrainTrace", "StopDecision", "early_stop", "train_individual",
    "train_group_head", "group_labels", "shuffle_order", "validation_split", "GroupSizeError",
]
