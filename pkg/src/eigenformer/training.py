"""Optimiser, learning-rate schedule, losses, metrics and the epoch loop.

Each task trains on the loss matching its reported metric: MAE for
regression, softmax cross-entropy for single-label classification and
sigmoid BCE for multilabel.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import FeatureSchema, TrainConfig
from .graph import Graph
from .model import Batch, EigenformerModel, HeadMismatchError, collate
from .spectral import SpectralDistances

__all__ = [
    "LRSchedule",
    "lr_at",
    "AdamW",
    "NonFiniteGradientError",
    "TrainingDivergedError",
    "MissingSpectraError",
    "compute_loss",
    "compute_metrics",
    "average_precision",
    "PRIMARY_METRIC",
    "clip_grad_norm",
    "state_dict",
    "load_state_dict",
    "predict",
    "evaluate",
    "fit",
    "FitResult",
]

PRIMARY_METRIC = {
    "graph-regression": ("mae", "min"),
    "graph-classification": ("accuracy", "max"),
    "multilabel-classification": ("ap", "max"),
    "node-classification": ("accuracy", "max"),
}


class NonFiniteGradientError(FloatingPointError):
    pass


class TrainingDivergedError(FloatingPointError):
    def __init__(self, message: str, last_good: dict | None, history: list):
        super().__init__(message)
        self.last_good = last_good
        self.history = history


class MissingSpectraError(ValueError):
    pass


# ---------------------------------------------------------------------------
# schedule and optimiser


@dataclass(frozen=True)
class LRSchedule:
    base_lr: float
    warmup_epochs: int
    max_epochs: int
    steps_per_epoch: int

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch

    @property
    def total_steps(self) -> int:
        return self.max_epochs * self.steps_per_epoch


def lr_at(s: LRSchedule, global_step: int) -> float:
    """Linear warmup from 0, then half-cosine decay to 0 at the last step."""
    if global_step < 0:
        raise ValueError("global_step must be nonnegative")
    warm, total = s.warmup_steps, s.total_steps
    if global_step < warm:
        return s.base_lr * global_step / warm
    span = total - 1 - warm
    if span <= 0:
        return s.base_lr if global_step == warm else 0.0
    t = min((global_step - warm) / span, 1.0)
    return s.base_lr * 0.5 * (1.0 + math.cos(math.pi * t))


class AdamW:
    """Adam with bias correction and decoupled weight decay."""

    def __init__(self, params: Sequence[Tensor], betas=(0.9, 0.99), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.step_count = 0

    def step(self, grads: dict, lr: float) -> None:
        gs = []
        for p in self.params:
            g = grads.get(p)
            g = np.zeros_like(p.value) if g is None else g
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(
                    f"non-finite gradient for parameter {p.name or tuple(p.shape)}; step skipped"
                )
            gs.append(g)
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for k, (p, g) in enumerate(zip(self.params, gs)):
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            mhat = self.m[k] / c1
            vhat = self.v[k] / c2
            p.value = p.value - lr * (mhat / (np.sqrt(vhat) + self.eps)) - lr * self.weight_decay * p.value


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return total


# ---------------------------------------------------------------------------
# losses and metrics


def compute_loss(prediction: Tensor, target: np.ndarray, task: str) -> Tensor:
    if task == "graph-regression":
        return ad.mae_loss(prediction, np.asarray(target, dtype=np.float64).reshape(prediction.shape))
    if task == "multilabel-classification":
        return ad.sigmoid_bce(prediction, target)
    if task == "graph-classification":
        labels = np.asarray(target).reshape(-1).astype(np.int64)
        return ad.softmax_cross_entropy(prediction, labels)
    if task == "node-classification":
        return ad.softmax_cross_entropy(prediction, np.asarray(target, dtype=np.int64))
    raise HeadMismatchError(f"unknown task {task!r}")


def average_precision(y_true, scores) -> float:
    """Area under the step precision-recall curve, ties grouped by score.

    A column with a single class has a degenerate curve; its AP is defined as
    the positive rate (0 or 1).
    """
    y = np.asarray(y_true, dtype=np.float64).reshape(-1)
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    npos = y.sum()
    if npos == 0 or npos == y.size:
        return float(npos / max(y.size, 1))
    order = np.argsort(-s, kind="mergesort")
    y, s = y[order], s[order]
    last = np.r_[np.flatnonzero(np.diff(s)), y.size - 1]
    tps = np.cumsum(y)[last]
    fps = last + 1 - tps
    precision = tps / (tps + fps)
    recall = tps / npos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def compute_metrics(predictions: np.ndarray, targets: np.ndarray, task: str) -> dict:
    p = np.asarray(predictions, dtype=np.float64)
    if p.shape[0] == 0:
        raise ValueError("cannot compute metrics on an empty evaluation set")
    if task == "graph-regression":
        t = np.asarray(targets, dtype=np.float64).reshape(p.shape)
        return {"mae": float(np.mean(np.abs(p - t)))}
    if task in ("graph-classification", "node-classification"):
        labels = np.asarray(targets).reshape(-1).astype(np.int64)
        return {"accuracy": float(np.mean(np.argmax(p, axis=1) == labels))}
    if task == "multilabel-classification":
        t = np.asarray(targets).reshape(p.shape)
        aps = [average_precision(t[:, c], p[:, c]) for c in range(p.shape[1])]
        return {"ap": float(np.mean(aps))}
    raise HeadMismatchError(f"unknown task {task!r}")


# ---------------------------------------------------------------------------
# model state


def state_dict(model: EigenformerModel) -> dict[str, np.ndarray]:
    out = {name: p.value.copy() for name, p in model.named_parameters()}
    for name, st, attr in model.named_buffers():
        out[name] = getattr(st, attr).copy()
    return out


def load_state_dict(model: EigenformerModel, state: dict[str, np.ndarray]) -> None:
    expected = [n for n, _ in model.named_parameters()] + [n for n, _, _ in model.named_buffers()]
    missing = [n for n in expected if n not in state]
    extra = sorted(set(state) - set(expected))
    if missing or extra:
        raise KeyError(f"state mismatch: missing {missing}, unexpected {extra}")
    for name, p in model.named_parameters():
        if state[name].shape != p.shape:
            raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
        p.value = np.array(state[name], dtype=np.float64)
    for name, st, attr in model.named_buffers():
        setattr(st, attr, np.array(state[name], dtype=np.float64))


# ---------------------------------------------------------------------------
# loop

Example = tuple[Graph, SpectralDistances]


def _batches(n: int, batch_size: int, rng: np.random.Generator | None) -> list[np.ndarray]:
    idx = rng.permutation(n) if rng is not None else np.arange(n)
    return [idx[i:i + batch_size] for i in range(0, n, batch_size)]


def _collate(data: Sequence[Example], idx) -> Batch:
    return collate([data[i][0] for i in idx], [data[i][1] for i in idx])


def predict(model: EigenformerModel, data: Sequence[Example], batch_size: int = 64):
    """Eval-mode predictions and aligned targets, concatenated over batches."""
    preds, targets = [], []
    with ad.no_grad():
        for idx in _batches(len(data), batch_size, None):
            batch = _collate(data, idx)
            preds.append(model.forward(batch, train=False).value)
            targets.append(batch.targets)
    return np.concatenate(preds), np.concatenate(targets)


def evaluate(model: EigenformerModel, data: Sequence[Example], batch_size: int = 64) -> dict:
    if not data:
        raise ValueError("evaluation set is empty")
    p, t = predict(model, data, batch_size)
    metrics = compute_metrics(p, t, model.task)
    with ad.no_grad():
        metrics["loss"] = compute_loss(Tensor(p), t, model.task).item()
    return metrics


@dataclass
class FitResult:
    model: EigenformerModel
    history: list[dict]
    lr_trace: list[float]
    best_state: dict[str, np.ndarray]
    best_epoch: int
    timings: list[float] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)


def _check_data(data: Sequence[Example], name: str) -> None:
    for k, ex in enumerate(data):
        if not isinstance(ex, tuple) or len(ex) != 2 or ex[1] is None:
            raise MissingSpectraError(f"{name} graph {k} has no precomputed spectra")


def fit(
    config: TrainConfig,
    schema: FeatureSchema,
    train: Sequence[Example],
    val: Sequence[Example] = (),
    test: Sequence[Example] = (),
    callbacks: Sequence[Callable[[dict], bool | None]] = (),
    log_path: str | Path | None = None,
    timing_path: str | Path | None = None,
) -> FitResult:
    """Train a fresh model; everything random is derived from ``config.seed``.

    A callback returning True stops training after the current epoch. The
    returned model holds the best-validation weights (best training loss when
    there is no validation set).
    """
    config.check()
    if not train:
        raise ValueError("training set is empty")
    _check_data(train, "train")
    _check_data(val, "val")
    _check_data(test, "test")

    model = EigenformerModel(config, schema)
    shuffle_rng, dropout_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(2)
    )
    params = model.parameters()
    for name, p in model.named_parameters():
        p.name = name
    opt = AdamW(params, betas=(0.9, 0.99), eps=1e-8, weight_decay=config.weight_decay)
    steps = math.ceil(len(train) / config.batch_size)
    sched = LRSchedule(config.lr, config.warmup_epochs, config.max_epochs, steps)
    metric_name, direction = PRIMARY_METRIC[config.task]

    history: list[dict] = []
    lr_trace: list[float] = []
    timings: list[float] = []
    best_state = state_dict(model)
    best_score = math.inf
    best_epoch = -1
    log = open(log_path, "w") if log_path else None
    tlog = open(timing_path, "w") if timing_path else None
    try:
        for epoch in range(config.max_epochs):
            t0 = time.perf_counter()
            total, count = 0.0, 0
            lr = 0.0
            for idx in _batches(len(train), config.batch_size, shuffle_rng):
                batch = _collate(train, idx)
                loss = compute_loss(
                    model.forward(batch, train=True, rng=dropout_rng), batch.targets, config.task
                )
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingDivergedError(
                        f"loss became {value} at epoch {epoch}", best_state, history
                    )
                grads = ad.backward(loss)
                if config.grad_clip is not None:
                    clip_grad_norm(grads, config.grad_clip)
                lr = lr_at(sched, opt.step_count)
                lr_trace.append(lr)
                opt.step(grads, lr)
                total += value * len(idx)
                count += len(idx)

            record = {"epoch": epoch, "lr": lr, "train_loss": total / count, "val_metric": None}
            if val:
                record["val_metric"] = evaluate(model, val, config.batch_size)[metric_name]
                score = -record["val_metric"] if direction == "max" else record["val_metric"]
            else:
                score = record["train_loss"]
            if score < best_score:
                best_score, best_epoch = score, epoch
                best_state = state_dict(model)
            wall_ms = (time.perf_counter() - t0) * 1000.0
            timings.append(wall_ms)
            history.append(record)
            if log:
                log.write(json.dumps(record) + "\n")
                log.flush()
            if tlog:
                tlog.write(json.dumps({"epoch": epoch, "wall_ms": round(wall_ms, 3)}) + "\n")
            if any(cb(record) for cb in callbacks):
                break
    finally:
        if log:
            log.close()
        if tlog:
            tlog.close()

    load_state_dict(model, best_state)
    result = FitResult(model, history, lr_trace, best_state, best_epoch, timings)
    for name, data in (("train", train), ("val", val), ("test", test)):
        if data:
            result.metrics[name] = evaluate(model, data, config.batch_size)
    return result
