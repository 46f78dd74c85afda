"""Objectives, Adam, the epoch loop and finite-difference gradient checks."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import Dataset, batches, split
from .errors import ConfigError, DataError
from .inference import bits_per_dimension
from .model import Model
from .numerics import log_softmax

logger = logging.getLogger(__name__)

OBJECTIVES = ("nll", "cross_entropy")


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 50
    epochs: int = 100
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    objective: str = "nll"
    seed: int = 0
    val_fraction: float = 0.1
    weight_decay: float = 0.0

    def validate(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        return self


# --------------------------------------------------------------------------
# objectives


@dataclass
class BatchStats:
    loss: float  # mean objective value
    density_nll: float  # mean -log p(x | y)
    correct: int | None  # classification hits (cross-entropy only)
    size: int


def _labels_for(model: Model, labels, n):
    if labels is None:
        return np.zeros(n, dtype=np.intp)
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != (n,):
        raise DataError(f"expected {n} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= model.num_classes):
        raise DataError(f"labels must lie in [0, {model.num_classes})")
    return labels


def evaluate_batch(model: Model, x, labels=None, objective: str = "nll",
                   need_grad: bool = False):
    """Objective statistics for one batch, plus gradients of the mean loss if asked."""
    x = np.atleast_2d(np.asarray(x))
    n = x.shape[0]
    if n == 0:
        raise DataError("empty batch")
    if objective == "cross_entropy":
        if labels is None:
            raise DataError("cross_entropy needs labels")
        if model.num_classes < 2:
            raise DataError("cross_entropy needs a model with at least two classes")
    y = _labels_for(model, labels if model.num_classes > 1 else None, n)

    if objective == "nll":
        res = model.forward(x, cls=y, keep_cache=need_grad)
        logp, cache = res if need_grad else (res, None)
        stats = BatchStats(float(-logp.mean()), float(-logp.mean()), None, n)
        grads = model.backward(cache, np.full(n, -1.0 / n)) if need_grad else None
        return stats, grads

    K = model.num_classes
    xs = np.repeat(x, K, axis=0)
    cls = np.tile(np.arange(K), n)
    res = model.forward(xs, cls=cls, keep_cache=need_grad)
    ll, cache = res if need_grad else (res, None)
    ll = ll.reshape(n, K)
    logpost = log_softmax(ll)
    rows = np.arange(n)
    stats = BatchStats(float(-logpost[rows, y].mean()), float(-ll[rows, y].mean()),
                       int(np.sum(np.argmax(ll, axis=1) == y)), n)
    grads = None
    if need_grad:
        g = np.exp(logpost)
        g[rows, y] -= 1.0
        grads = model.backward(cache, (g / n).ravel())
    return stats, grads


def loss_and_gradients(model: Model, x, labels=None, objective: str = "nll"):
    """Mean batch loss and its exact gradient for every parameter."""
    stats, grads = evaluate_batch(model, x, labels, objective, need_grad=True)
    return stats.loss, grads


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params):
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adam_step(params, grads, state: AdamState, config: TrainConfig):
    """One bias-corrected Adam update, applied in place. Returns (params, state)."""
    state.step += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for k, p in params.items():
        g = grads[k]
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {k} {p.shape}")
        m = state.m.setdefault(k, np.zeros_like(p))
        v = state.v.setdefault(k, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if config.weight_decay:
            p -= config.learning_rate * config.weight_decay * p
        p -= config.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + config.adam_epsilon)
    return params, state


# --------------------------------------------------------------------------
# epoch loop


@dataclass
class EpochRecord:
    epoch: int
    split: str
    nll: float
    bpd: float
    acc: float | None

    def line(self) -> str:
        acc = "na" if self.acc is None else repr(float(self.acc))
        return (f"epoch={self.epoch} split={self.split} nll={self.nll!r} "
                f"bpd={self.bpd!r} acc={acc}")


@dataclass
class TrainResult:
    model: Model
    trace: list[EpochRecord]
    best_epoch: int | None
    optimizer: AdamState


def _aggregate(stats: list[BatchStats], num_dims: int, epoch: int, split_name: str):
    n = sum(s.size for s in stats)
    loss = sum(s.loss * s.size for s in stats) / n
    density = sum(s.density_nll * s.size for s in stats) / n
    acc = None
    if stats[0].correct is not None:
        acc = sum(s.correct for s in stats) / n
    return EpochRecord(epoch, split_name, float(loss),
                       float(bits_per_dimension(density, num_dims)), acc)


def evaluate(model: Model, dataset: Dataset, objective: str, batch_size: int, epoch: int = 0,
             split_name: str = "val") -> EpochRecord:
    x = dataset.flat()
    stats = [evaluate_batch(model, x[idx], None if dataset.labels is None else
                            dataset.labels[idx], objective)[0]
             for idx in batches(len(dataset), batch_size)]
    return _aggregate(stats, dataset.num_dims, epoch, split_name)


def train(model: Model, dataset: Dataset, config: TrainConfig,
          on_record: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Adam on the training split, keeping the parameters with the best validation loss.

    Training-split records average the per-batch losses seen during the
    epoch; validation records are full passes after the epoch.
    """
    config.validate()
    if len(dataset) == 0:
        raise DataError("dataset is empty")
    if dataset.num_dims != model.structure.num_variables:
        raise DataError(f"data has {dataset.num_dims} dimensions, model expects "
                        f"{model.structure.num_variables}")
    if config.objective == "cross_entropy" and dataset.labels is None:
        raise DataError("cross_entropy training needs labels")

    model = model.copy()
    state = AdamState.for_params(model.params)
    trace: list[EpochRecord] = []
    best, best_loss, best_epoch = model.copy(), math.inf, None
    if config.epochs == 0:
        return TrainResult(best, trace, None, state)

    train_set, val_set = split(dataset, config.val_fraction, config.seed)
    if len(train_set) == 0 or len(val_set) == 0:
        raise DataError(f"{len(dataset)} samples are too few for a train/validation split")
    rng = np.random.default_rng(config.seed)
    x = train_set.flat()
    labels = train_set.labels
    for epoch in range(1, config.epochs + 1):
        seen = []
        for idx in batches(len(train_set), config.batch_size, rng):
            stats, grads = evaluate_batch(model, x[idx], None if labels is None else labels[idx],
                                          config.objective, need_grad=True)
            adam_step(model.params, grads, state, config)
            seen.append(stats)
        rec_train = _aggregate(seen, train_set.num_dims, epoch, "train")
        rec_val = evaluate(model, val_set, config.objective, config.batch_size, epoch, "val")
        for rec in (rec_train, rec_val):
            trace.append(rec)
            if on_record is not None:
                on_record(rec)
        logger.info("%s | %s", rec_train.line(), rec_val.line())
        if rec_val.nll < best_loss:
            best, best_loss, best_epoch = model.copy(), rec_val.nll, epoch
    return TrainResult(best, trace, best_epoch, state)


# --------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradientReport:
    max_rel_error: dict[str, float]
    tolerance: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def ok(self) -> bool:
        return self.worst < self.tolerance


def relative_error(analytic, numeric, floor: float = 1e-3):
    """|a - n| / max(|a|, |n|, floor); the floor turns near-zero comparisons absolute."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def check_gradients(model: Model, x, labels=None, objective: str = "nll",
                    tolerance: float = 1e-5, eps: float = 1e-6,
                    max_parameters: int = 100_000) -> GradientReport:
    """Compare analytic gradients to central differences on every coordinate."""
    if model.num_parameters() > max_parameters:
        raise ValueError(f"{model.num_parameters()} parameters exceed {max_parameters}")
    _, grads = loss_and_gradients(model, x, labels, objective)

    def loss():
        return evaluate_batch(model, x, labels, objective)[0].loss

    errors = {}
    for name, p in model.params.items():
        numeric = np.empty_like(p)
        flat = p.reshape(-1)
        out = numeric.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = loss()
            flat[i] = old - eps
            down = loss()
            flat[i] = old
            out[i] = (up - down) / (2 * eps)
        errors[name] = float(relative_error(grads[name], numeric).max()) if p.size else 0.0
    return GradientReport(errors, tolerance)
