"""Minibatch training with early stopping, and batched inference."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Protocol

import numpy as np

from ..errors import DivergenceError, ValidationError
from .losses import LOSSES_WITH_LOGITS
from .layers import BatchNorm
from .models import Network
from .ops import sigmoid
from .optim import Adam


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 8
    max_epochs: int = 100
    loss: str = "bce"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    patience: int = 10
    threshold: float = 1e-4
    dice_smooth: float = 1.0
    recalibrate_bn: bool = True

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValidationError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ValidationError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.loss not in LOSSES_WITH_LOGITS:
            raise ValidationError(f"loss must be one of {sorted(LOSSES_WITH_LOGITS)}, got {self.loss!r}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValidationError("beta1 and beta2 must lie in [0, 1)")
        if self.patience < 1:
            raise ValidationError(f"patience must be >= 1, got {self.patience}")

    def to_dict(self) -> dict:
        return asdict(self)


# Learning rates and batch sizes reported for the three experiments.
PAPER_TRAIN = {
    "shallow_cnn": TrainConfig(learning_rate=5e-3, batch_size=32, loss="bce"),
    "resnet3d": TrainConfig(learning_rate=5e-5, batch_size=32, loss="bce"),
    "unet3d": TrainConfig(learning_rate=1e-4, batch_size=32, loss="dice"),
}


class Dataset(Protocol):
    def __len__(self) -> int: ...

    def batch(self, indices: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]: ...


class ArrayDataset:
    """Fixed inputs ``x`` (N, C, *S) and targets ``y``."""

    def __init__(self, x, y):
        self.x = np.asarray(x)
        self.y = np.asarray(y, dtype=np.float64)
        if len(self.x) != len(self.y):
            raise ValidationError(f"{len(self.x)} inputs but {len(self.y)} targets")

    def __len__(self):
        return len(self.x)

    def batch(self, indices, rng=None):
        return self.x[indices].astype(np.float64), self.y[indices]


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    train_metric: float
    val_metric: float


@dataclass
class TrainResult:
    history: list[EpochRecord] = field(default_factory=list)
    converged: bool = False
    best_epoch: int = 0
    best_val_loss: float = float("inf")
    stopped_epoch: int = 0


def _batches(order: np.ndarray, size: int) -> list[np.ndarray]:
    chunks = [order[i : i + size] for i in range(0, len(order), size)]
    # batchnorm cannot train on a single example; fold a lone tail into its neighbour
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def _metric(task: str, p: np.ndarray, y: np.ndarray) -> float:
    if task == "classification":
        return float(np.mean((p.reshape(-1) >= 0.5) == (y.reshape(-1) >= 0.5)))
    pred = p >= 0.5
    truth = y >= 0.5
    axes = tuple(range(1, p.ndim))
    inter = (pred & truth).sum(axis=axes)
    total = pred.sum(axis=axes) + truth.sum(axis=axes)
    dice = np.where(total > 0, 2.0 * inter / np.maximum(total, 1), 1.0)
    return float(dice.mean())


def _targets_like(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    return y.reshape(z.shape)


def evaluate(model: Network, dataset, config: TrainConfig, batch_size: Optional[int] = None):
    """Inference-mode loss and metric over a whole dataset.

    The loss is aggregated like the training objective: BCE averaged over
    cases, Dice computed per batch then averaged by batch size.
    """
    n = len(dataset)
    bs = batch_size or config.batch_size
    loss_fn = LOSSES_WITH_LOGITS[config.loss]
    total_loss = 0.0
    probs, targets = [], []
    for start in range(0, n, bs):
        idx = np.arange(start, min(n, start + bs))
        x, y = dataset.batch(idx, None)
        z = model.forward(x, train=False)
        y = _targets_like(z, y)
        if config.loss == "dice":
            loss, _, p = loss_fn(z, y, config.dice_smooth)
        else:
            loss, _, p = loss_fn(z, y)
        total_loss += loss * len(idx)
        probs.append(p)
        targets.append(y)
    p = np.concatenate(probs)
    y = np.concatenate(targets)
    return total_loss / n, _metric(model.task, p, y), p


def recalibrate_batchnorm(model: Network, dataset, batch_size: int, rng=None) -> None:
    """Re-estimate batchnorm running statistics with the weights frozen.

    Each layer's running mean/variance becomes the plain average of its
    per-batch statistics over one ordered pass through ``dataset``. The
    exponential moving average kept during training lags the weights; when
    the class signal is a small shift in features this lag alone can flip
    inference-mode predictions.
    """
    layers = [m for m in model.body.modules() if isinstance(m, BatchNorm)]
    if not layers:
        return
    saved = [bn.momentum for bn in layers]
    try:
        for k, idx in enumerate(_batches(np.arange(len(dataset)), batch_size), start=1):
            for bn in layers:
                bn.momentum = (k - 1) / k
            x, _ = dataset.batch(idx, rng)
            model.forward(x, train=True)
    finally:
        for bn, m in zip(layers, saved):
            bn.momentum = m
            bn._cache = None


def loss_and_gradients(model: Network, x, y, loss: str = "bce", dice_smooth: float = 1.0, train: bool = True):
    """One forward/backward pass: ``(loss, {param name: gradient})``."""
    if loss not in LOSSES_WITH_LOGITS:
        raise ValidationError(f"loss must be one of {sorted(LOSSES_WITH_LOGITS)}, got {loss!r}")
    z = model.forward(np.asarray(x, dtype=np.float64), train=train)
    y = _targets_like(z, np.asarray(y, dtype=np.float64))
    if loss == "dice":
        value, dz, _ = LOSSES_WITH_LOGITS[loss](z, y, dice_smooth)
    else:
        value, dz, _ = LOSSES_WITH_LOGITS[loss](z, y)
    model.backward(dz)
    return value, {k: g.copy() for k, g in model.gradients().items()}


def train(model: Network, dataset, config: TrainConfig, val=None, log=None) -> TrainResult:
    """Minibatch Adam with per-epoch reshuffling and val-loss early stopping.

    Before each validation pass the batchnorm statistics are re-estimated
    over the training set (see :func:`recalibrate_batchnorm`) unless
    ``config.recalibrate_bn`` is off. A run counts as converged once the validation loss has failed to improve
    by more than ``config.threshold`` for ``config.patience`` consecutive
    epochs. The model is left holding its best-validation-epoch weights.
    ``log``, if given, is called as ``log(epoch, batch_indices)`` for every
    training batch.
    """
    n = len(dataset)
    if n < 2:
        raise ValidationError("training needs at least two examples")
    val = val if val is not None else dataset
    rng = np.random.default_rng([int(config.seed), 0x7261696E])
    opt = Adam(config.learning_rate, config.beta1, config.beta2, config.eps)
    params = model.parameters()
    loss_fn = LOSSES_WITH_LOGITS[config.loss]
    result = TrainResult()
    best_snap = model.snapshot()
    wait = 0

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        seen = 0
        loss_sum = 0.0
        metric_sum = 0.0
        for idx in _batches(order, config.batch_size):
            if log is not None:
                log(epoch, idx)
            x, y = dataset.batch(idx, rng)
            z = model.forward(x, train=True)
            y = _targets_like(z, y)
            if config.loss == "dice":
                loss, dz, p = loss_fn(z, y, config.dice_smooth)
            else:
                loss, dz, p = loss_fn(z, y)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}", epoch)
            model.backward(dz)
            grads = model.gradients()
            if not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise DivergenceError(f"non-finite gradient at epoch {epoch}", epoch)
            opt.step(params, grads)
            loss_sum += loss * len(idx)
            metric_sum += _metric(model.task, p, y) * len(idx)
            seen += len(idx)

        if config.recalibrate_bn:
            recalibrate_batchnorm(model, dataset, config.batch_size, np.random.default_rng([int(config.seed), 0x626E, epoch]))
        val_loss, val_metric, _ = evaluate(model, val, config)
        if not np.isfinite(val_loss):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}", epoch)
        result.history.append(EpochRecord(epoch, loss_sum / seen, val_loss, metric_sum / seen, val_metric))
        result.stopped_epoch = epoch
        if val_loss < result.best_val_loss - config.threshold or result.best_epoch == 0:
            result.best_val_loss = val_loss
            result.best_epoch = epoch
            best_snap = model.snapshot()
            wait = 0
        else:
            wait += 1
            if wait >= config.patience:
                result.converged = True
                break

    model.restore(best_snap)
    model.optimizer = opt
    return result


def predict(model: Network, x) -> np.ndarray:
    """Inference-mode probabilities: ``(N,)`` for classifiers, ``(N, *S)`` for U-Nets.

    Cases go through one at a time: BLAS kernels round differently depending on
    a row's position in a batch, and a score must not depend on its neighbours.
    """
    x = np.asarray(x)
    out = [sigmoid(model.forward(x[i : i + 1].astype(np.float64), train=False)) for i in range(len(x))]
    p = np.concatenate(out) if out else np.zeros((0,))
    if model.task == "classification":
        return p.reshape(-1)
    return p[:, 0]


def predict_mask(model: Network, x, threshold: float = 0.5) -> np.ndarray:
    return predict(model, x) >= threshold


def write_history_csv(history: list[EpochRecord], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "train_metric", "val_metric"])
        for r in history:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.train_metric), repr(r.val_metric)])
    return path
