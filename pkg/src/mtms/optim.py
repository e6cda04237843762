"""First-order optimizers, minibatching, early stopping and learning-rate ladders."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

DECAY_LADDER = (0.01, 0.001, 0.001, 0.0005, 0.0003, 0.0001, 0.00005)


def _check_grads(grads):
    if not np.all(np.isfinite(grads)):
        raise FloatingPointError("non-finite gradient")


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    step: int = 0

    def update(self, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
        """Bias-corrected Adam step, applied to ``params`` in place."""
        _check_grads(grads)
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.step += 1
        self.m *= self.beta1
        self.m += (1 - self.beta1) * grads
        self.v *= self.beta2
        self.v += (1 - self.beta2) * grads * grads
        mhat = self.m / (1 - self.beta1 ** self.step)
        vhat = self.v / (1 - self.beta2 ** self.step)
        params -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return params


@dataclass
class AdadeltaState:
    lr: float = 0.001
    rho: float = 0.9
    eps: float = 1e-6
    sq_grad: np.ndarray | None = None
    sq_delta: np.ndarray | None = None
    step: int = 0

    def update(self, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
        _check_grads(grads)
        if self.sq_grad is None:
            self.sq_grad = np.zeros_like(params)
            self.sq_delta = np.zeros_like(params)
        self.step += 1
        self.sq_grad *= self.rho
        self.sq_grad += (1 - self.rho) * grads * grads
        delta = np.sqrt(self.sq_delta + self.eps) / np.sqrt(self.sq_grad + self.eps) * grads
        self.sq_delta *= self.rho
        self.sq_delta += (1 - self.rho) * delta * delta
        params -= self.lr * delta
        return params


@dataclass
class SgdState:
    lr: float = 0.01
    step: int = 0

    def update(self, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
        _check_grads(grads)
        self.step += 1
        params -= self.lr * grads
        return params


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    return state.update(params, grads)


def adadelta_step(state: AdadeltaState, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    return state.update(params, grads)


OPTIMIZERS = {"adam": AdamState, "adadelta": AdadeltaState, "sgd": SgdState}


def make_optimizer(name: str, lr: float):
    try:
        return OPTIMIZERS[name](lr=lr)
    except KeyError:
        raise ValueError(f"unknown optimizer {name!r}") from None


@dataclass
class EarlyStopState:
    patience: int = 10
    best_loss: float = np.inf
    best_params: np.ndarray | None = None
    best_epoch: int = -1
    epochs_since_best: int = 0

    def observe(self, epoch: int, loss: float, params: np.ndarray) -> bool:
        """Record a validation loss; return True when training should stop."""
        if loss < self.best_loss:
            self.best_loss = loss
            self.best_params = params.copy()
            self.best_epoch = epoch
            self.epochs_since_best = 0
        else:
            self.epochs_since_best += 1
        return self.epochs_since_best >= self.patience


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffle ``range(n)`` and cut it into consecutive chunks."""
    if n <= 0:
        raise ValueError("no samples to batch")
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


@dataclass
class TraceRow:
    epoch: int
    train_loss: float
    val_loss: float
    stage_lr: float


@dataclass
class TrainResult:
    params: np.ndarray
    best_loss: float
    trace: list[TraceRow] = field(default_factory=list)


Objective = Callable[[np.ndarray, object, np.random.Generator], tuple[float, np.ndarray]]


def train_loop(objective: Objective, params: np.ndarray, batches: Callable[[np.random.Generator], Iterable],
               optimizer, rng: np.random.Generator, val_fn: Callable[[np.ndarray], float] | None = None,
               patience: int = 10, max_epochs: int = 500, epoch_offset: int = 0) -> TrainResult:
    """Minibatch descent with early stopping on ``val_fn``.

    ``batches(rng)`` yields the minibatches of one epoch.  Without
    ``val_fn`` the epoch's mean training loss drives early stopping.
    Returns the parameters at the best validation loss.
    """
    params = np.array(params, dtype=np.float64, copy=True)
    stopper = EarlyStopState(patience=patience)
    trace = []
    if val_fn is not None:
        stopper.observe(epoch_offset, val_fn(params), params)
    for epoch in range(1, max_epochs + 1):
        losses = []
        for batch in batches(rng):
            loss, grad = objective(params, batch, rng)
            optimizer.update(params, grad)
            losses.append(loss)
        if not losses:
            raise ValueError("empty data: an epoch produced no minibatches")
        train_loss = float(np.mean(losses))
        val_loss = train_loss if val_fn is None else float(val_fn(params))
        trace.append(TraceRow(epoch_offset + epoch, train_loss, val_loss, optimizer.lr))
        if stopper.observe(epoch_offset + epoch, val_loss, params):
            break
    return TrainResult(stopper.best_params, stopper.best_loss, trace)


def train_ladder(objective: Objective, params: np.ndarray, batches, rng: np.random.Generator,
                 ladder: Sequence[float] = DECAY_LADDER, optimizer: str = "adam",
                 val_fn=None, patience: int = 10, max_epochs: int = 500) -> TrainResult:
    """Run ``train_loop`` once per learning rate, each stage restarting from the last best."""
    if not ladder:
        raise ValueError("learning-rate ladder must be non-empty")
    trace: list[TraceRow] = []
    best = np.inf
    for lr in ladder:
        res = train_loop(objective, params, batches, make_optimizer(optimizer, lr), rng,
                         val_fn=val_fn, patience=patience, max_epochs=max_epochs,
                         epoch_offset=len(trace))
        trace.extend(res.trace)
        params, best = res.params, res.best_loss
        log.info("stage lr=%g done after %d epochs, best %.6g", lr, len(res.trace), best)
    return TrainResult(params, best, trace)


def write_trace_csv(trace: Sequence[TraceRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss", "stage_lr"])
        for row in trace:
            w.writerow([row.epoch, repr(row.train_loss), repr(row.val_loss), repr(row.stage_lr)])
