"""Linear special case: per-series AR coefficients ``beta_m = omega_b + omega_w @ theta_m``.

Fitted by alternating the two closed-form least-squares conditions (all of
``omega`` given the mesa vectors, then each mesa vector given ``omega``).
``d_theta = 0`` reduces to a pooled regression and ``d_theta = d_x + 1`` to
one regression per series.
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from mtms.losses import SEASONAL_PERIOD, DegenerateSeriesError, mase_scale

log = logging.getLogger(__name__)


def lag_matrix(y: np.ndarray, d_x: int) -> tuple[np.ndarray, np.ndarray]:
    """Design rows ``[1, y[t-1], ..., y[t-d_x]]`` and targets ``y[t]`` for ``t >= d_x``."""
    y = np.asarray(y, dtype=np.float64)
    n = len(y) - d_x
    if n <= 0:
        raise ValueError(f"series of length {len(y)} too short for {d_x} lags")
    X = np.empty((n, d_x + 1))
    X[:, 0] = 1.0
    for k in range(1, d_x + 1):
        X[:, k] = y[d_x - k: len(y) - k]
    return X, y[d_x:]


@dataclass
class SeriesSet:
    """Training segments of ``M`` series, optionally divided by their MASE scale."""

    series: list[np.ndarray]
    d_x: int
    freq: str = "yearly"
    scales: np.ndarray | None = None

    def __post_init__(self):
        self.series = [np.asarray(s, dtype=np.float64) for s in self.series]
        if self.scales is None:
            self.scales = np.ones(len(self.series))
        self._design = [lag_matrix(s, self.d_x) for s in self.series]

    @classmethod
    def from_raw(cls, series: Sequence, d_x: int, freq: str = "yearly", scale: bool = True) -> "SeriesSet":
        """Divide every series by its in-sample seasonal-naive MAE before embedding."""
        period = SEASONAL_PERIOD.get(freq, 1)
        series = [np.asarray(s, dtype=np.float64) for s in series]
        scales = np.array([mase_scale(s, period) for s in series]) if scale else np.ones(len(series))
        return cls([s / c for s, c in zip(series, scales)], d_x, freq, scales)

    def __len__(self):
        return len(self.series)

    @property
    def n_coef(self) -> int:
        return self.d_x + 1

    def design(self, m: int) -> tuple[np.ndarray, np.ndarray]:
        return self._design[m]

    def pooled(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.concatenate([X for X, _ in self._design]),
                np.concatenate([y for _, y in self._design]))


@dataclass
class LinearMtMs:
    omega_b: np.ndarray
    omega_w: np.ndarray
    thetas: np.ndarray
    history: list[float] = field(default_factory=list)
    rank_deficient: bool = False
    n_iter: int = 0

    @property
    def d_theta(self) -> int:
        return self.omega_w.shape[1]

    def betas(self) -> np.ndarray:
        """``(M, d_x + 1)`` per-series coefficients."""
        return self.omega_b[None, :] + self.thetas @ self.omega_w.T

    def beta(self, theta) -> np.ndarray:
        return self.omega_b + self.omega_w @ np.asarray(theta, dtype=np.float64)

    def fitted(self, data: SeriesSet) -> list[np.ndarray]:
        B = self.betas()
        return [data.design(m)[0] @ B[m] for m in range(len(data))]


def sse(data: SeriesSet, betas: np.ndarray) -> float:
    return float(sum(np.sum((y - X @ b) ** 2) for (X, y), b in
                     ((data.design(m), betas[m]) for m in range(len(data)))))


def _lstsq(A, b):
    coef, _, rank, _ = np.linalg.lstsq(A, b, rcond=None)
    return coef, rank < min(A.shape[1], A.shape[0]) if A.shape[1] else False


def _omega_step(data: SeriesSet, thetas: np.ndarray) -> tuple[np.ndarray, bool]:
    """Least-squares ``vec(omega)`` for fixed mesa vectors (column-major vec)."""
    p = data.n_coef
    rows, ys = [], []
    for m in range(len(data)):
        X, y = data.design(m)
        ttil = np.concatenate(([1.0], thetas[m]))
        rows.append(np.kron(ttil[None, :], X))
        ys.append(y)
    H = np.concatenate(rows)
    vec, deficient = _lstsq(H, np.concatenate(ys))
    return vec.reshape(-1, p).T, deficient


def _theta_step(data: SeriesSet, omega_b: np.ndarray, omega_w: np.ndarray) -> tuple[np.ndarray, bool]:
    d_theta = omega_w.shape[1]
    thetas = np.zeros((len(data), d_theta))
    deficient = False
    if d_theta == 0:
        return thetas, False
    for m in range(len(data)):
        X, y = data.design(m)
        thetas[m], bad = _lstsq(X @ omega_w, y - X @ omega_b)
        deficient |= bad
    return thetas, deficient


def _pca_start(data: SeriesSet, d_theta: int) -> np.ndarray | None:
    """Mesa start from the leading principal components of per-series OLS coefficients."""
    betas = []
    for m in range(len(data)):
        X, y = data.design(m)
        if X.shape[0] < X.shape[1]:
            return None
        betas.append(ols(X, y))
    B = np.stack(betas)
    B = B - B.mean(axis=0)
    u, s, _ = np.linalg.svd(B, full_matrices=False)
    start = np.zeros((len(data), d_theta))
    k = min(d_theta, u.shape[1])
    start[:, :k] = u[:, :k] * s[:k]
    return start


def _als_run(data: SeriesSet, thetas: np.ndarray, max_iters: int, tol: float):
    history: list[float] = []
    deficient = False
    d_theta = thetas.shape[1]
    prev = np.inf
    it = 0
    for it in range(1, max_iters + 1):
        omega, bad = _omega_step(data, thetas)
        deficient |= bad
        omega_b, omega_w = omega[:, 0], omega[:, 1:]
        history.append(sse(data, omega_b[None, :] + thetas @ omega_w.T))
        thetas, bad = _theta_step(data, omega_b, omega_w)
        deficient |= bad
        obj = sse(data, omega_b[None, :] + thetas @ omega_w.T)
        history.append(obj)
        if d_theta == 0 or obj == 0.0 or (np.isfinite(prev) and prev - obj <= tol * prev):
            break
        prev = obj
    return LinearMtMs(omega_b, omega_w, thetas, history, deficient, it)


def als_fit(data: SeriesSet, d_theta: int, max_iters: int = 500, tol: float = 1e-10,
            rng: np.random.Generator | None = None, center: bool = True, restarts: int = 4) -> LinearMtMs:
    """Alternating least squares for ``(omega_b, omega_w, thetas)``.

    ``history`` records the pooled SSE after every half-step (omega update,
    then mesa update).  Both updates are exact least-squares solves, so the
    sequence is non-increasing; rank-deficient solves fall back to the
    minimum-norm solution and set ``rank_deficient``.

    The objective is bilinear and ALS can stall at a poor stationary point,
    so it runs from the principal components of the per-series OLS
    coefficients and from ``restarts`` random mesa draws, keeping the run
    with the lowest objective.
    """
    p = data.n_coef
    if not 0 <= d_theta <= p:
        raise ValueError(f"d_theta must be in [0, {p}], got {d_theta}")
    rng = rng if rng is not None else np.random.default_rng(0)
    starts = []
    if d_theta > 0:
        pca = _pca_start(data, d_theta)
        if pca is not None:
            starts.append(pca)
    starts += [rng.standard_normal((len(data), d_theta)) for _ in range(max(restarts, 0) + (not starts))]
    if d_theta == 0:
        starts = starts[:1]
    model = min((_als_run(data, s, max_iters, tol) for s in starts), key=lambda r: r.history[-1])
    if model.rank_deficient:
        warnings.warn("rank-deficient least-squares solve in ALS; used minimum-norm solution",
                      RuntimeWarning, stacklevel=2)
    if center and d_theta > 0:
        recenter(model)
    return model


def recenter(model: LinearMtMs) -> LinearMtMs:
    """Shift mesa vectors to mean zero; coefficients are unchanged."""
    mean = model.thetas.mean(axis=0)
    model.omega_b = model.omega_b + model.omega_w @ mean
    model.thetas = model.thetas - mean
    return model


def adapt_series(model: LinearMtMs, y: np.ndarray, d_x: int | None = None,
                 design: tuple[np.ndarray, np.ndarray] | None = None) -> np.ndarray:
    """Closed-form mesa vector for a new (already scaled) series, omega frozen."""
    if design is None:
        X, target = lag_matrix(y, d_x if d_x is not None else len(model.omega_b) - 1)
    else:
        X, target = design
    Q = X @ model.omega_w
    theta, bad = _lstsq(Q, target - X @ model.omega_b)
    if bad:
        warnings.warn("rank-deficient mesa solve; used minimum-norm solution", RuntimeWarning, stacklevel=2)
    return theta


def ols(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.linalg.lstsq(X, y, rcond=None)[0]


def pooled_ols(data: SeriesSet) -> np.ndarray:
    return ols(*data.pooled())


def per_series_ols(data: SeriesSet) -> np.ndarray:
    return np.stack([ols(*data.design(m)) for m in range(len(data))])


def forecast_recursive(beta, history, horizon: int) -> np.ndarray:
    """``horizon`` forecasts, each fed back as the newest lag."""
    beta = np.asarray(beta, dtype=np.float64)
    d_x = len(beta) - 1
    hist = list(np.asarray(history, dtype=np.float64))
    if len(hist) < d_x:
        raise ValueError(f"need at least {d_x} history values, got {len(hist)}")
    out = np.empty(horizon)
    for h in range(horizon):
        lags = hist[::-1][:d_x]
        out[h] = beta[0] + float(np.dot(beta[1:], lags))
        hist.append(out[h])
    return out


# clustering baseline ----------------------------------------------------------

def _acf(y: np.ndarray, nlags: int) -> np.ndarray:
    y = y - y.mean()
    denom = np.dot(y, y)
    out = np.zeros(nlags)
    if denom == 0:
        return out
    for k in range(1, min(nlags, len(y) - 1) + 1):
        out[k - 1] = np.dot(y[k:], y[:-k]) / denom
    return out


def _r2(X: np.ndarray, y: np.ndarray) -> float:
    resid = y - X @ ols(X, y)
    tot = np.sum((y - y.mean()) ** 2)
    return 0.0 if tot == 0 else float(1.0 - resid @ resid / tot)


def series_features(y: np.ndarray, period: int = 1, nlags: int = 10) -> np.ndarray:
    """Autocorrelations 1..nlags, trend strength and seasonal strength (both as R^2)."""
    y = np.asarray(y, dtype=np.float64)
    t = np.arange(len(y), dtype=np.float64)
    trend = _r2(np.column_stack([np.ones_like(t), t]), y)
    if period > 1:
        dummies = (np.arange(len(y))[:, None] % period == np.arange(period)[None, :]).astype(float)
        seasonal = _r2(dummies, y)
    else:
        seasonal = 0.0
    return np.concatenate([_acf(y, nlags), [trend, seasonal]])


def feature_matrix(data: SeriesSet) -> np.ndarray:
    period = SEASONAL_PERIOD.get(data.freq, 1)
    F = np.stack([series_features(s, period) for s in data.series])
    sd = F.std(axis=0)
    return (F - F.mean(axis=0)) / np.where(sd > 0, sd, 1.0)


@dataclass
class ClusterModel:
    centroids: np.ndarray
    labels: np.ndarray
    coefs: np.ndarray

    def betas(self) -> np.ndarray:
        return self.coefs[self.labels]


def cluster_fit(data: SeriesSet, k: int, rng: np.random.Generator | None = None,
                n_init: int = 20) -> ClusterModel:
    """k-means on z-scored series features, then pooled OLS inside each cluster."""
    from sklearn.cluster import KMeans

    if not 1 <= k <= len(data):
        raise ValueError(f"k must be in [1, {len(data)}], got {k}")
    rng = rng if rng is not None else np.random.default_rng(0)
    F = feature_matrix(data)
    if k == 1:
        labels = np.zeros(len(data), dtype=np.int64)
        centroids = F.mean(axis=0, keepdims=True)
    else:
        km = KMeans(n_clusters=k, n_init=n_init, random_state=int(rng.integers(2**31 - 1)))
        labels = km.fit_predict(F).astype(np.int64)
        centroids = km.cluster_centers_
    coefs = np.zeros((k, data.n_coef))
    for c in range(k):
        members = np.flatnonzero(labels == c)
        if len(members) == 0:
            continue
        X = np.concatenate([data.design(m)[0] for m in members])
        y = np.concatenate([data.design(m)[1] for m in members])
        coefs[c] = ols(X, y)
    return ClusterModel(centroids, labels, coefs)


# text formats -----------------------------------------------------------------------

def read_series_csv(path) -> list[np.ndarray]:
    """One series per line, comma-separated values; ragged lengths allowed."""
    out = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            vals = [v.strip() for v in row if v.strip()]
            if not vals:
                continue
            try:
                out.append(np.array([float(v) for v in vals]))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric value") from None
    return out


def write_series_csv(series: Sequence[np.ndarray], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for s in series:
            w.writerow([repr(float(v)) for v in s])


__all__ = [
    "DegenerateSeriesError", "SeriesSet", "LinearMtMs", "ClusterModel", "lag_matrix", "als_fit",
    "adapt_series", "forecast_recursive", "cluster_fit", "pooled_ols", "per_series_ols", "sse",
    "recenter", "series_features", "read_series_csv", "write_series_csv",
]
