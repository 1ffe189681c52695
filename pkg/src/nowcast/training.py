"""Backpropagation-through-time training with RMSProp.

The loss of one sample is the cross-entropy summed over all predicted frames;
a mini-batch loss is the mean over its samples. Gradients come from a full
unroll of the encoder and forecaster.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .network import EncoderForecaster
from .tensor import Tape, no_tape

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training aborted; ``report`` holds everything recorded so far."""

    def __init__(self, message: str, report: "TrainReport"):
        super().__init__(message)
        self.report = report


@dataclass
class OptimizerState:
    """RMSProp running mean of squared gradients, one array per parameter."""

    acc: list[np.ndarray]
    lr: float = 1e-3
    decay: float = 0.9
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, lr=1e-3, decay=0.9, eps=1e-8) -> "OptimizerState":
        return cls([np.zeros(p.shape) for p in params], lr, decay, eps)


def rmsprop_update(opt: OptimizerState, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
    """``acc <- decay*acc + (1-decay)*g^2``; ``p <- p - lr*g/sqrt(acc+eps)``.

    Accumulators are updated in place; new parameter arrays are returned.
    """
    if not (len(params) == len(grads) == len(opt.acc)):
        raise ValueError("parameter, gradient and accumulator counts differ")
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != opt.acc[i].shape:
            raise ValueError(f"shape mismatch at parameter {i}: {p.shape} / {g.shape} / {opt.acc[i].shape}")
        acc = opt.decay * opt.acc[i] + (1.0 - opt.decay) * g * g
        opt.acc[i] = acc
        out.append(p - opt.lr * g / np.sqrt(acc + opt.eps))
    return out


def clip_by_global_norm(grads: list[np.ndarray], max_norm: float) -> list[np.ndarray]:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if norm <= max_norm or norm == 0.0:
        return grads
    return [g * (max_norm / norm) for g in grads]


@dataclass
class Schedule:
    lr: float = 1e-3
    decay: float = 0.9
    batch: int = 8
    epochs: int = 20
    patience: int = 3
    seed: int = 0
    clip: float | None = None
    max_iterations: int | None = None
    prior_bias: bool = False  # start the readout bias at the log-odds of the mean target

    @classmethod
    def from_dict(cls, d: dict) -> "Schedule":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        s = cls(**d)
        if s.batch < 1 or s.epochs < 1 or s.patience < 0 or s.lr < 0 or not 0 <= s.decay < 1:
            raise ValueError(f"invalid training schedule: {s}")
        return s


@dataclass
class TrainReport:
    iteration_loss: list[tuple[int, float]] = field(default_factory=list)
    val_loss: list[tuple[int, float]] = field(default_factory=list)
    best_epoch: int | None = None
    best_iteration: int | None = None
    stop_reason: str = ""

    def write_csv(self, directory: str | Path) -> None:
        directory = Path(directory)
        with open(directory / "train_loss.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loss"])
            w.writerows((i, repr(v)) for i, v in self.iteration_loss)
        with open(directory / "val_loss.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "val_loss"])
            w.writerows((e, repr(v)) for e, v in self.val_loss)


def with_prior_bias(model: EncoderForecaster, targets: np.ndarray) -> EncoderForecaster:
    """Set the readout bias to the log-odds of the mean target pixel.

    The network then starts at the best constant forecast instead of 0.5
    everywhere, so the first updates need not drive the recurrent state into
    saturation just to darken the background.
    """
    p = float(np.clip(np.mean(targets), 1e-4, 1 - 1e-4))
    logit = math.log(p / (1 - p))
    return model.with_values([np.full(t.shape, logit) if n == "readout.b" else t.data
                              for n, t in model.params.items()])


def split_io(sequences: np.ndarray, n_input: int) -> tuple[np.ndarray, np.ndarray]:
    """Split ``(N, T, C, H, W)`` sequences into observed and target frames."""
    if not 0 < n_input < sequences.shape[1]:
        raise ValueError(f"cannot split {sequences.shape[1]} frames at {n_input}")
    return sequences[:, :n_input], sequences[:, n_input:]


def gradient_step(model: EncoderForecaster, inputs, targets) -> tuple[float, list[np.ndarray]]:
    with Tape() as tape:
        loss = model.loss(inputs, targets)
    return loss.item(), tape.gradient(loss, model.parameters)


def evaluate_loss(model: EncoderForecaster, inputs: np.ndarray, targets: np.ndarray, batch: int = 16) -> float:
    """Average cross-entropy per sequence."""
    total = 0.0
    with no_tape():
        for s in range(0, len(inputs), batch):
            n = len(inputs[s:s + batch])
            total += model.loss(inputs[s:s + batch], targets[s:s + batch]).item() * n
    return total / len(inputs)


def _apply(model, opt, schedule, grads) -> EncoderForecaster:
    if schedule.clip:
        grads = clip_by_global_norm(grads, schedule.clip)
    new = rmsprop_update(opt, [p.data for p in model.parameters], grads)
    return model.with_values(new)


def save_training_checkpoint(path, model, opt, iteration, epoch, extra=None) -> None:
    tensors = [(f"opt.{n}", a) for n, a in zip(model.params, opt.acc)]
    header = {"iteration": iteration, "epoch": epoch, "lr": opt.lr, "decay": opt.decay, "eps": opt.eps}
    header.update(extra or {})
    model.save(path, header, tensors)


def load_training_checkpoint(path) -> tuple[EncoderForecaster, OptimizerState, dict]:
    model, header, rest = EncoderForecaster.load(path)
    acc = [rest[f"opt.{n}"] if f"opt.{n}" in rest else np.zeros(p.shape) for n, p in model.params.items()]
    opt = OptimizerState(acc, header.get("lr", 1e-3), header.get("decay", 0.9), header.get("eps", 1e-8))
    return model, opt, header


def train(
    model: EncoderForecaster,
    train_set: tuple[np.ndarray, np.ndarray],
    val_set: tuple[np.ndarray, np.ndarray],
    schedule: Schedule,
    checkpoint: str | Path | None = None,
    opt: OptimizerState | None = None,
    start_iteration: int = 0,
    start_epoch: int = 0,
    progress: Callable[[int, float], None] | None = None,
    last_checkpoint: str | Path | None = None,
) -> tuple[TrainReport, EncoderForecaster]:
    """Mini-batch RMSProp with validation-based early stopping.

    Returns the report and the model with the lowest validation loss, which is
    also written to ``checkpoint`` whenever it improves. ``last_checkpoint``
    receives the latest model and optimiser state after every epoch, for
    resuming.
    """
    x_train, y_train = train_set
    x_val, y_val = val_set
    if len(x_train) == 0 or len(x_val) == 0:
        raise ValueError("training and validation sets must be non-empty")
    if opt is None:
        if schedule.prior_bias:
            model = with_prior_bias(model, y_train)
        opt = OptimizerState.for_params(model.parameters, schedule.lr, schedule.decay)
    report = TrainReport()
    best_val, best_model, stale = math.inf, model, 0
    iteration = start_iteration
    epoch = start_epoch
    report.stop_reason = "max epochs"
    while epoch < start_epoch + schedule.epochs:
        # Seeded per epoch so that a resumed run sees the same batches.
        order = np.random.default_rng([schedule.seed, epoch]).permutation(len(x_train))
        for s in range(0, len(order), schedule.batch):
            idx = np.sort(order[s:s + schedule.batch])
            try:
                loss, grads = gradient_step(model, x_train[idx], y_train[idx])
            except FloatingPointError as exc:
                report.stop_reason = f"non-finite loss at iteration {iteration + 1}"
                raise TrainingError(f"{report.stop_reason}: {exc}", report) from exc
            model = _apply(model, opt, schedule, grads)
            iteration += 1
            report.iteration_loss.append((iteration, loss))
            if progress:
                progress(iteration, loss)
            if schedule.max_iterations and iteration - start_iteration >= schedule.max_iterations:
                break
        epoch += 1
        val = evaluate_loss(model, x_val, y_val)
        report.val_loss.append((epoch, val))
        log.info("epoch %d iteration %d val %.4f", epoch, iteration, val)
        if last_checkpoint is not None:
            save_training_checkpoint(last_checkpoint, model, opt, iteration, epoch, {"val_loss": val})
        if val < best_val:
            best_val, best_model, stale = val, model, 0
            report.best_epoch, report.best_iteration = epoch, iteration
            if checkpoint is not None:
                save_training_checkpoint(checkpoint, model, opt, iteration, epoch, {"val_loss": val})
        else:
            stale += 1
            if stale > schedule.patience:
                report.stop_reason = f"no validation improvement for {stale} epoch(s)"
                break
        if schedule.max_iterations and iteration - start_iteration >= schedule.max_iterations:
            report.stop_reason = "max iterations"
            break
    return report, best_model


def train_online(
    model: EncoderForecaster,
    generator: Callable[[int], tuple[np.ndarray, np.ndarray]],
    iterations: int,
    opt: OptimizerState | None = None,
    lr: float = 1e-3,
    decay: float = 0.9,
    clip: float | None = None,
) -> tuple[list[float], EncoderForecaster]:
    """One RMSProp step per freshly generated batch; returns the per-batch loss trace."""
    if opt is None:
        opt = OptimizerState.for_params(model.parameters, lr, decay)
    schedule = Schedule(lr=opt.lr, decay=opt.decay, clip=clip)
    trace = []
    for it in range(iterations):
        inputs, targets = generator(it)
        loss, grads = gradient_step(model, inputs, targets)
        trace.append(loss)
        model = _apply(model, opt, schedule, grads)
    return trace, model
