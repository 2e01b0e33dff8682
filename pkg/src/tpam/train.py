"""Loss, Adam, dataset splitting and the training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ArgumentError, ShapeError
from .model import TpamModel, backward_batch, forward_batch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    batch_size: int = 128
    epochs: int = 10
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0 or self.eps_opt <= 0:
            raise ArgumentError("learning_rate and eps_opt must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ArgumentError("betas must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ArgumentError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    ids: Optional[list[str]] = None
    num_classes: Optional[int] = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise ShapeError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if self.ids is not None and len(self.ids) != len(self.labels):
            raise ShapeError("ids and labels differ in length")
        if len(self.labels) and self.labels.min() < 0:
            raise ArgumentError("labels must be non-negative class indices")
        if self.num_classes is not None and len(self.labels) and self.labels.max() >= self.num_classes:
            raise ArgumentError(f"label {self.labels.max()} out of range for {self.num_classes} classes")

    def __len__(self):
        return len(self.labels)

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        ids = None if self.ids is None else [self.ids[i] for i in index]
        return Dataset(self.inputs[index], self.labels[index], ids, self.num_classes)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy_batch(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample losses and d loss / d logits, via a max-shifted log-sum-exp."""
    z = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    C = z.shape[-1]
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= C:
        raise ArgumentError(f"labels out of range for {C} classes")
    if not np.all(np.isfinite(z)):
        raise ArgumentError("logits contain NaN or Inf")
    shifted = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    rows = np.arange(len(labels))
    losses = lse - shifted[rows, labels]
    upstream = np.exp(shifted - lse[:, None])
    upstream[rows, labels] -= 1.0
    return losses, upstream


def softmax_cross_entropy(logits, label: int) -> tuple[float, np.ndarray]:
    losses, up = softmax_cross_entropy_batch(np.asarray(logits)[np.newaxis], np.array([label]))
    return float(losses[0]), up[0]


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, model: TpamModel) -> "OptimizerState":
        return cls(
            {k: np.zeros_like(p) for k, p in model.params.items()},
            {k: np.zeros_like(p) for k, p in model.params.items()},
        )


def adam_step(model: TpamModel, grads: dict, state: OptimizerState, cfg: TrainConfig):
    """Bias-corrected Adam update, applied in place; returns ``(model, state)``."""
    state.t += 1
    bc1 = 1.0 - cfg.beta1**state.t
    bc2 = 1.0 - cfg.beta2**state.t
    for name, p in model.params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        p -= cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps_opt)
    return model, state


def split_dataset(d: Dataset, seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Seeded 70/20/10 split; validation and test sizes are floored, the rest trains."""
    n = len(d)
    if n < 10:
        raise ArgumentError(f"need at least 10 samples to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_val = (n * 20) // 100
    n_test = (n * 10) // 100
    n_train = n - n_val - n_test
    return (
        d.subset(order[:n_train]),
        d.subset(order[n_train : n_train + n_val]),
        d.subset(order[n_train + n_val :]),
    )


def holdout_split(d: Dataset, fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded (train, validation) split for datasets that ship their own test set."""
    n = len(d)
    n_val = int(n * fraction)
    if not 0 < n_val < n:
        raise ArgumentError(f"validation fraction {fraction} leaves an empty side for {n} samples")
    order = np.random.default_rng(seed).permutation(n)
    return d.subset(order[n_val:]), d.subset(order[:n_val])


def predict(model: TpamModel, inputs: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    """Argmax class per input; ``np.argmax`` resolves ties to the lowest index."""
    out = np.empty(len(inputs), dtype=np.int64)
    for i in range(0, len(inputs), batch_size):
        out[i : i + batch_size] = np.argmax(forward_batch(model, inputs[i : i + batch_size]), axis=1)
    return out


def evaluate(model: TpamModel, d: Dataset, batch_size: int = 1024) -> float:
    if len(d) == 0:
        return 0.0
    return float(np.mean(predict(model, d.inputs, batch_size) == d.labels))


def batch_loss_and_grads(model: TpamModel, X: np.ndarray, y: np.ndarray):
    """Mean cross-entropy over the batch and its parameter gradients."""
    logits = forward_batch(model, X)
    losses, up = softmax_cross_entropy_batch(logits, y)
    grads = backward_batch(model, X, (up / len(y)).astype(model.dtype))
    return float(losses.mean()), grads


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_acc: float

    def line(self) -> str:
        return f"epoch={self.epoch} loss={self.train_loss:.6f} val_acc={self.val_acc:.6f}"


@dataclass
class FitResult:
    model: TpamModel
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_acc: float = float("nan")


def fit(
    model: TpamModel,
    train: Dataset,
    val: Dataset,
    cfg: TrainConfig,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> FitResult:
    """Adam training; returns the parameters with the best validation accuracy.

    ``model`` itself is not modified.  Train loss per epoch is the mean of the
    minibatch losses weighted by batch size.
    """
    if train.inputs.shape[1:] != model.config.input_shape:
        raise ShapeError(f"training inputs {train.inputs.shape[1:]} vs model {model.config.input_shape}")
    current = model.copy()
    result = FitResult(model.copy())
    if cfg.epochs == 0:
        return result
    state = OptimizerState.zeros_like(current)
    rng = np.random.default_rng(cfg.seed)
    X = train.inputs.astype(current.dtype, copy=False)
    n = len(train)
    best = -1.0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        total = 0.0
        for i in range(0, n, cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            loss, grads = batch_loss_and_grads(current, X[idx], train.labels[idx])
            total += loss * len(idx)
            adam_step(current, grads, state, cfg)
        acc = evaluate(current, val)
        rec = EpochRecord(epoch, total / n, acc)
        result.history.append(rec)
        log.info(rec.line())
        if on_epoch is not None:
            on_epoch(rec)
        if acc > best:
            best = acc
            result.model = current.copy()
            result.best_epoch = epoch
            result.best_val_acc = acc
    return result
