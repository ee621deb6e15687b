"""Seeded training loop and evaluation for the gaze regressor.

The loop is deliberately plain: a fixed number of steps per epoch, a
fresh shuffle each epoch drawn from a single generator, and first-order
updates applied in a stable parameter order, so a run repeats bit for
bit on the same platform.  ``train`` never mutates the parameters it is
given; it returns a new set.

A learning rate of zero turns the loop into a measurement pass: no
parameter updates, no running-statistic updates, and no reshuffling, so
every epoch sees identical batches and the loss curve is exactly flat.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import net as _net
from .dataset import NormalizedSample, to_training_arrays
from .errors import TrainingDivergedError, ValidationError
from .net import Batch, NetworkParams

_OPTIMIZERS = ("adam", "sgd")
_REDUCTIONS = ("sum", "mean")
_PRECISIONS = ("float64", "float32")


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for one training run.

    ``steps_per_epoch`` fixes the batch count; the batch size follows
    from the training-set size (``ceil(n / steps_per_epoch)``), so the
    same config adapts to training sets of different sizes.
    """

    epochs: int = 40
    steps_per_epoch: int = 12
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0
    bn_momentum: float = 0.9
    loss_reduction: str = "sum"
    precision: str = "float64"

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValidationError("epochs must be at least 1")
        if self.steps_per_epoch < 1:
            raise ValidationError("steps_per_epoch must be at least 1")
        # zero is allowed: it makes the run a pure measurement pass
        if not (self.learning_rate >= 0.0) or not math.isfinite(self.learning_rate):
            raise ValidationError("learning_rate must be finite and >= 0")
        if self.optimizer not in _OPTIMIZERS:
            raise ValidationError(f"optimizer must be one of {_OPTIMIZERS}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError("momentum must be in [0, 1)")
        if not 0.0 < self.beta1 < 1.0 or not 0.0 < self.beta2 < 1.0:
            raise ValidationError("beta1 and beta2 must be in (0, 1)")
        if self.adam_epsilon <= 0.0:
            raise ValidationError("adam_epsilon must be positive")
        if not 0.0 <= self.bn_momentum <= 1.0:
            raise ValidationError("bn_momentum must be in [0, 1]")
        if self.loss_reduction not in _REDUCTIONS:
            raise ValidationError(f"loss_reduction must be one of {_REDUCTIONS}")
        if self.precision not in _PRECISIONS:
            raise ValidationError(f"precision must be one of {_PRECISIONS}")

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float64 if self.precision == "float64" else np.float32)


@dataclass
class TrainRecord:
    """History of one run: per-epoch mean train-mode batch loss, plus
    per-epoch held-out mean error when validation data was supplied."""

    losses: list[float]
    val_errors: list[float] | None = None

    def __len__(self) -> int:
        return len(self.losses)


@dataclass
class EvalResult:
    """Per-sample Euclidean gaze errors and their summary statistics."""

    mean_error: float
    std_error: float
    per_sample: np.ndarray

    def __len__(self) -> int:
        return len(self.per_sample)


class _AdamState:
    def __init__(self, weights: dict) -> None:
        self.step_count = 0
        self.first = {k: np.zeros_like(w) for k, w in weights.items()}
        self.second = {k: np.zeros_like(w) for k, w in weights.items()}

    def apply(self, weights: dict, grads: dict, config: TrainConfig) -> None:
        self.step_count += 1
        b1, b2 = config.beta1, config.beta2
        corr1 = 1.0 - b1 ** self.step_count
        corr2 = 1.0 - b2 ** self.step_count
        for name, grad in grads.items():
            m = self.first[name]
            v = self.second[name]
            m *= b1
            m += (1.0 - b1) * grad
            v *= b2
            v += (1.0 - b2) * np.square(grad)
            step = (m / corr1) / (np.sqrt(v / corr2) + config.adam_epsilon)
            weights[name] -= config.learning_rate * step


class _MomentumState:
    def __init__(self, weights: dict) -> None:
        self.velocity = {k: np.zeros_like(w) for k, w in weights.items()}

    def apply(self, weights: dict, grads: dict, config: TrainConfig) -> None:
        for name, grad in grads.items():
            v = self.velocity[name]
            v *= config.momentum
            v += grad
            weights[name] -= config.learning_rate * v


def train(
    params: NetworkParams,
    data: Sequence[NormalizedSample],
    config: TrainConfig | None = None,
    *,
    val_data: Sequence[NormalizedSample] | None = None,
) -> tuple[NetworkParams, TrainRecord]:
    """Run the training loop; return updated parameters and history.

    ``val_data``, when given, is evaluated in inference mode after every
    epoch and the mean errors land in the record's ``val_errors``.
    """
    if config is None:
        config = TrainConfig()
    if len(data) == 0:
        raise ValidationError("training set is empty")
    dtype = config.dtype
    images, head_angles, targets = to_training_arrays(data, dtype=dtype)
    val_arrays = None
    if val_data is not None:
        val_arrays = to_training_arrays(val_data, dtype=dtype)

    work = params.astype(dtype)
    updating = config.learning_rate > 0.0
    if config.optimizer == "adam":
        state = _AdamState(work.weights)
    else:
        state = _MomentumState(work.weights)

    total = len(data)
    batch_size = -(-total // config.steps_per_epoch)
    step_count = -(-total // batch_size)
    rng = np.random.default_rng(config.seed)
    order = np.arange(total)

    losses: list[float] = []
    val_errors: list[float] = []
    for epoch in range(1, config.epochs + 1):
        if updating:
            order = rng.permutation(total)
        batch_losses = []
        for step in range(step_count):
            sel = order[step * batch_size : (step + 1) * batch_size]
            batch = Batch(
                images=images[sel],
                head_angles=head_angles[sel],
                targets=targets[sel],
            )
            # divergence is detected and raised, not warned about
            with np.errstate(over="ignore", invalid="ignore"):
                preds, cache = _net.forward(
                    work,
                    batch,
                    mode="train",
                    bn_momentum=config.bn_momentum,
                    update_running=updating,
                )
            if np.all(np.isfinite(preds)):
                batch_loss = _net.loss(preds, batch.targets, reduction=config.loss_reduction)
            else:
                batch_loss = math.inf
            if not math.isfinite(batch_loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, step {step + 1}",
                    epoch=epoch,
                    step=step + 1,
                )
            if updating:
                with np.errstate(over="ignore", invalid="ignore"):
                    grads = _net.backward(work, batch, cache, reduction=config.loss_reduction)
                state.apply(work.weights, grads, config)
            batch_losses.append(batch_loss)
        losses.append(float(np.mean(batch_losses)))
        if val_arrays is not None:
            val_errors.append(_evaluate_arrays(work, *val_arrays).mean_error)
    record = TrainRecord(losses=losses, val_errors=val_errors if val_data is not None else None)
    return work, record


def evaluate(
    params: NetworkParams,
    data: Sequence[NormalizedSample],
    *,
    batch_size: int = 500,
) -> EvalResult:
    """Inference-mode per-sample Euclidean errors over a labelled set."""
    if len(data) == 0:
        raise ValidationError("evaluation set is empty")
    dtype = params.weights["stem.w"].dtype
    images, head_angles, targets = to_training_arrays(data, dtype=dtype)
    return _evaluate_arrays(params, images, head_angles, targets, batch_size=batch_size)


def _evaluate_arrays(
    params: NetworkParams,
    images: np.ndarray,
    head_angles: np.ndarray,
    targets: np.ndarray,
    *,
    batch_size: int = 500,
) -> EvalResult:
    if batch_size < 1:
        raise ValidationError("batch_size must be at least 1")
    total = images.shape[0]
    distances = np.empty(total, dtype=np.float64)
    for start in range(0, total, batch_size):
        sel = slice(start, min(start + batch_size, total))
        batch = Batch(
            images=images[sel],
            head_angles=head_angles[sel],
            targets=targets[sel],
        )
        preds = _net.forward(params, batch, mode="eval")
        diff = preds.astype(np.float64) - targets[sel].astype(np.float64)
        distances[sel] = np.sqrt(np.sum(diff * diff, axis=1))
    # population std: the evaluated set is the whole population of interest
    return EvalResult(
        mean_error=float(distances.mean()),
        std_error=float(distances.std()),
        per_sample=distances,
    )


def export_history(record: TrainRecord, path) -> None:
    """Write epoch history as CSV: ``epoch,loss[,val_error]``."""
    has_val = record.val_errors is not None
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "val_error"] if has_val else ["epoch", "loss"])
        for i, loss in enumerate(record.losses):
            row = [i + 1, repr(loss)]
            if has_val:
                row.append(repr(record.val_errors[i]) if i < len(record.val_errors) else "")
            writer.writerow(row)
