"""Loss functions: MSE, ranked probability score over quintiles, MASE."""
from __future__ import annotations

import numpy as np

from mtms.autodiff import Node, Tape

N_QUINTILES = 5
# seasonal periods used for the MASE scale, by frequency tag
SEASONAL_PERIOD = {"yearly": 1, "quarterly": 4, "monthly": 12, "weekly": 1}


class DegenerateSeriesError(ValueError):
    pass


def mse(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return float(np.mean((pred - target) ** 2))


def _cum_matrix(k: int) -> np.ndarray:
    # p @ U gives row-wise cumulative sums
    return np.triu(np.ones((k, k)))


def rps(pred, outcome) -> float | np.ndarray:
    """Ranked probability score, normalised by the number of categories.

    ``pred`` and ``outcome`` are (5,) vectors or (n, 5) arrays of
    probabilities and one-hot outcomes.  Returns a scalar for a single
    vector and per-row scores otherwise.
    """
    pred = np.asarray(pred, dtype=np.float64)
    outcome = np.asarray(outcome, dtype=np.float64)
    single = pred.ndim == 1
    pred, outcome = np.atleast_2d(pred), np.atleast_2d(outcome)
    if pred.shape != outcome.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {outcome.shape}")
    if np.any(pred < 0) or np.any(np.abs(pred.sum(axis=1) - 1.0) > 1e-9):
        raise ValueError("predictions must lie on the probability simplex")
    if np.any((outcome != 0) & (outcome != 1)) or np.any(outcome.sum(axis=1) != 1):
        raise ValueError("outcomes must be one-hot")
    diff = np.cumsum(pred, axis=1) - np.cumsum(outcome, axis=1)
    scores = (diff ** 2).mean(axis=1)
    return float(scores[0]) if single else scores


def one_hot(labels, k: int = N_QUINTILES) -> np.ndarray:
    """Integer labels in 1..k to one-hot rows."""
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, k))
    out[np.arange(labels.size), labels - 1] = 1.0
    return out


def mase_scale(train, period: int = 1) -> float:
    """In-sample mean absolute error of the seasonal-naive forecast."""
    train = np.asarray(train, dtype=np.float64)
    if train.size <= period:
        raise DegenerateSeriesError(f"need more than {period} training values for the MASE scale")
    scale = float(np.mean(np.abs(train[period:] - train[:-period])))
    if not scale > 0:
        raise DegenerateSeriesError("constant training series: MASE scale is zero")
    return scale


def mase(forecasts, actuals, scale: float) -> float:
    if not scale > 0:
        raise DegenerateSeriesError(f"MASE scale must be positive, got {scale}")
    forecasts = np.asarray(forecasts, dtype=np.float64)
    actuals = np.asarray(actuals, dtype=np.float64)
    if forecasts.shape != actuals.shape:
        raise ValueError(f"shape mismatch: {forecasts.shape} vs {actuals.shape}")
    return float(np.mean(np.abs(forecasts - actuals)) / scale)


# tape builders ---------------------------------------------------------

def mse_node(tape: Tape, pred: Node, target: Node) -> Node:
    return tape.mean(tape.square(tape.sub(pred, target)))


def mae_node(tape: Tape, pred: Node, target: Node) -> Node:
    return tape.mean(tape.abs(tape.sub(pred, target)))


def rps_node(tape: Tape, probs: Node, onehot: Node, cum: Node) -> Node:
    """Mean RPS over rows; ``cum`` must be bound to an upper-triangular ones matrix."""
    diff = tape.matmul(tape.sub(probs, onehot), cum)
    return tape.mean(tape.square(diff))


LOSS_NODES = {"mse": mse_node, "mae": mae_node}


def cum_matrix(k: int = N_QUINTILES) -> np.ndarray:
    return _cum_matrix(k)
