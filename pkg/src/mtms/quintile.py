"""Quintile forecasting on a synthetic weekly market.

Pipeline: simulate prices, cut them into 4-week intervals on four
interleaved grids, build per-asset features at each interval start, label
each asset by the quintile of its next 4-week return within its universe
of 100, then fit a meta/mesa model with one mesa row per asset under the
ranked probability score.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mtms.losses import N_QUINTILES, one_hot, rps
from mtms.model import (Connection, MtMsModel, Phase1Config, Phase2Config, Task, TaskBundle, init_phase2,
                        predict_many, train_phase1, train_phase2)
from mtms.nn import MlpSpec

log = logging.getLogger(__name__)

UNIVERSE_SIZE = 100
INTERVAL_WEEKS = 4
N_LAGS = 7
HISTORY_WEEKS = INTERVAL_WEEKS * N_LAGS

FEATURE_NAMES = (
    ("is_etf",)
    + tuple(f"ret_lag{k}" for k in range(1, N_LAGS + 1))
    + tuple(f"vol_lag{k}" for k in range(1, N_LAGS + 1))
    + ("ema10_ratio", "rsi14", "roc12", "macd", "vol26")
)
RETURN_FEATURES = tuple(f"ret_lag{k}" for k in range(1, N_LAGS + 1)) + ("roc12",)
VOL_FEATURES = tuple(f"vol_lag{k}" for k in range(1, N_LAGS + 1)) + ("vol26",)


# market --------------------------------------------------------------------

@dataclass
class SynthMarketConfig:
    """Weekly factor model with persistent, heterogeneous volatility."""

    factor_vol: float = 0.02
    factor_mean: float = 0.001
    beta_dispersion: float = 0.3
    base_vol: float = 0.035
    vol_dispersion: float = 0.8      # std of log long-run vol across assets
    vol_persistence: float = 0.95    # AR(1) coefficient of log vol
    vol_of_vol: float = 0.25         # stationary std of the log-vol deviation
    etf_fraction: float = 0.5
    etf_vol_ratio: float = 0.6
    constant_assets: tuple[int, ...] = ()

    @classmethod
    def homogeneous(cls) -> "SynthMarketConfig":
        """Every asset has the same return law: nothing to learn across assets."""
        return cls(beta_dispersion=0.0, vol_dispersion=0.0, vol_of_vol=0.0, etf_vol_ratio=1.0)


@dataclass
class Market:
    prices: np.ndarray        # (n_assets, n_weeks + 1), all > 0
    is_etf: np.ndarray        # (n_assets,) bool
    vol: np.ndarray           # (n_assets, n_weeks) latent weekly vol
    universe: np.ndarray      # (n_assets,) universe id, 0 is the primary universe

    @property
    def n_assets(self) -> int:
        return self.prices.shape[0]

    @property
    def n_weeks(self) -> int:
        return self.prices.shape[1] - 1

    @property
    def log_returns(self) -> np.ndarray:
        return np.diff(np.log(self.prices), axis=1)

    @property
    def constant(self) -> np.ndarray:
        """Assets whose price never moves."""
        return np.all(self.log_returns == 0, axis=1)

    @property
    def degenerate(self) -> bool:
        """True when every asset has the same return in every week."""
        r = self.log_returns
        return bool(np.all(r == r[:1]))


def synth_market(n_assets: int, n_weeks: int, seed: int,
                 config: SynthMarketConfig | None = None) -> Market:
    if n_assets <= 0 or n_assets % UNIVERSE_SIZE:
        raise ValueError(f"n_assets must be a positive multiple of {UNIVERSE_SIZE}, got {n_assets}")
    if n_weeks <= 0:
        raise ValueError("n_weeks must be positive")
    config = config or SynthMarketConfig()
    rng = np.random.default_rng(seed)
    is_etf = np.zeros(n_assets, dtype=bool)
    # half of every block of 100 are ETFs so each universe mirrors the primary one
    for u in range(n_assets // UNIVERSE_SIZE):
        block = np.arange(u * UNIVERSE_SIZE, (u + 1) * UNIVERSE_SIZE)
        n_etf = int(round(config.etf_fraction * UNIVERSE_SIZE))
        is_etf[block[UNIVERSE_SIZE - n_etf:]] = True
    beta = 1.0 + config.beta_dispersion * rng.standard_normal(n_assets)
    long_run = config.base_vol * np.exp(config.vol_dispersion * rng.standard_normal(n_assets))
    long_run = np.where(is_etf, long_run * config.etf_vol_ratio, long_run)
    phi = config.vol_persistence
    h = np.empty((n_assets, n_weeks))
    h[:, 0] = config.vol_of_vol * rng.standard_normal(n_assets)
    shocks = config.vol_of_vol * np.sqrt(1 - phi ** 2) * rng.standard_normal((n_assets, n_weeks))
    for t in range(1, n_weeks):
        h[:, t] = phi * h[:, t - 1] + shocks[:, t]
    vol = long_run[:, None] * np.exp(h)
    f = config.factor_mean + config.factor_vol * rng.standard_normal(n_weeks)
    r = beta[:, None] * f[None, :] + vol * rng.standard_normal((n_assets, n_weeks))
    if config.constant_assets:
        r[list(config.constant_assets)] = 0.0
    prices = 100.0 * np.exp(np.concatenate([np.zeros((n_assets, 1)), np.cumsum(r, axis=1)], axis=1))
    universe = np.zeros(n_assets, dtype=np.int64)
    return Market(prices, is_etf, vol, universe)


def augment_universes(asset_ids, seed: int, n_universes: int = 9) -> list[np.ndarray]:
    """Random partition of the extra assets into universes of 100."""
    asset_ids = np.asarray(asset_ids, dtype=np.int64)
    if len(asset_ids) != n_universes * UNIVERSE_SIZE:
        raise ValueError(f"need exactly {n_universes * UNIVERSE_SIZE} extra assets, got {len(asset_ids)}")
    perm = np.random.default_rng(seed).permutation(asset_ids)
    return [np.sort(perm[u * UNIVERSE_SIZE:(u + 1) * UNIVERSE_SIZE]) for u in range(n_universes)]


def assign_universes(market: Market, seed: int) -> Market:
    """Assets 0..99 form universe 0; the rest are split at random into universes 1.."""
    extra = np.arange(UNIVERSE_SIZE, market.n_assets)
    universe = np.zeros(market.n_assets, dtype=np.int64)
    if len(extra):
        for u, members in enumerate(augment_universes(extra, seed, len(extra) // UNIVERSE_SIZE), start=1):
            universe[members] = u
    return Market(market.prices, market.is_etf, market.vol, universe)


# labels ----------------------------------------------------------------------

def quintile_labels(returns) -> np.ndarray:
    """Quintile 1..5 per asset; exactly 20 assets each.

    Ties are broken by asset index, lower index ranking lower.
    """
    returns = np.asarray(returns, dtype=np.float64)
    if returns.shape != (UNIVERSE_SIZE,):
        raise ValueError(f"need exactly {UNIVERSE_SIZE} returns, got shape {returns.shape}")
    order = np.lexsort((np.arange(UNIVERSE_SIZE), returns))
    labels = np.empty(UNIVERSE_SIZE, dtype=np.int64)
    labels[order] = np.arange(UNIVERSE_SIZE) // (UNIVERSE_SIZE // N_QUINTILES) + 1
    return labels


# interval grids ----------------------------------------------------------------

def interval_grid(n_weeks: int, shift: int = 0, start: int = 0, stop: int | None = None) -> np.ndarray:
    """(start, end) week pairs of consecutive 4-week windows inside ``[start, stop]``."""
    stop = n_weeks if stop is None else stop
    first = start + shift
    starts = np.arange(first, stop - INTERVAL_WEEKS + 1, INTERVAL_WEEKS)
    return np.stack([starts, starts + INTERVAL_WEEKS], axis=1) if len(starts) else np.zeros((0, 2), dtype=np.int64)


def augment_time_shift(n_weeks: int, start: int = 0, stop: int | None = None) -> list[np.ndarray]:
    """The unshifted grid and the grids shifted by 1, 2 and 3 weeks.

    Windows that would run past ``stop`` are dropped, so shifted grids can
    hold one interval fewer than the unshifted one.
    """
    return [interval_grid(n_weeks, s, start, stop) for s in range(INTERVAL_WEEKS)]


# features ------------------------------------------------------------------------

def _ema(prices: np.ndarray, span: int) -> np.ndarray:
    a = 2.0 / (span + 1)
    out = np.empty_like(prices)
    out[:, 0] = prices[:, 0]
    for t in range(1, prices.shape[1]):
        out[:, t] = a * prices[:, t] + (1 - a) * out[:, t - 1]
    return out


def _rsi(logret: np.ndarray, end: int, window: int = 14) -> np.ndarray:
    seg = logret[:, max(0, end - window):end]
    up = np.clip(seg, 0, None).mean(axis=1)
    down = np.clip(-seg, 0, None).mean(axis=1)
    total = up + down
    with np.errstate(invalid="ignore", divide="ignore"):
        # undefined for a flat window; left missing for the imputer
        return np.where(total > 0, 100.0 * up / total, np.nan)


def asset_features(market: Market, week: int, emas: dict[int, np.ndarray] | None = None) -> np.ndarray:
    """Raw features of every asset using prices up to ``week``; (n_assets, 20)."""
    if week < HISTORY_WEEKS:
        raise ValueError(f"interval starting at week {week} has less than {HISTORY_WEEKS} weeks of history")
    logp = np.log(market.prices)
    logret = np.diff(logp, axis=1)
    p = market.prices[:, week]
    cols = [market.is_etf.astype(np.float64)]
    for k in range(1, N_LAGS + 1):
        cols.append(logp[:, week - INTERVAL_WEEKS * (k - 1)] - logp[:, week - INTERVAL_WEEKS * k])
    for k in range(1, N_LAGS + 1):
        seg = logret[:, week - INTERVAL_WEEKS * k:week - INTERVAL_WEEKS * (k - 1)]
        cols.append(seg.std(axis=1))
    emas = emas if emas is not None else {s: _ema(market.prices, s) for s in (10, 12, 26)}
    cols.append(emas[10][:, week] / p - 1.0)
    cols.append(_rsi(logret, week))
    cols.append(p / market.prices[:, max(0, week - 12)] - 1.0)
    cols.append((emas[12][:, week] - emas[26][:, week]) / p)
    cols.append(logret[:, max(0, week - 26):week].std(axis=1))
    return np.stack(cols, axis=1)


@dataclass
class FeatureTable:
    asset_id: np.ndarray
    universe_id: np.ndarray
    shift: np.ndarray
    interval_start: np.ndarray
    interval_end: np.ndarray
    labels: np.ndarray        # 1..5
    features: np.ndarray      # raw, may contain NaN
    names: tuple[str, ...] = FEATURE_NAMES

    def __len__(self):
        return len(self.asset_id)

    def subset(self, mask) -> "FeatureTable":
        mask = np.asarray(mask)
        return FeatureTable(self.asset_id[mask], self.universe_id[mask], self.shift[mask],
                            self.interval_start[mask], self.interval_end[mask], self.labels[mask],
                            self.features[mask], self.names)

    @classmethod
    def concat(cls, tables: list["FeatureTable"]) -> "FeatureTable":
        cat = lambda attr: np.concatenate([getattr(t, attr) for t in tables])
        return cls(cat("asset_id"), cat("universe_id"), cat("shift"), cat("interval_start"),
                   cat("interval_end"), cat("labels"), cat("features"), tables[0].names)


def build_features(market: Market, grids: list[np.ndarray]) -> FeatureTable:
    """One row per (asset, interval) over the given grids, labels within each universe."""
    emas = {s: _ema(market.prices, s) for s in (10, 12, 26)}
    logp = np.log(market.prices)
    n = market.n_assets
    ids = np.arange(n)
    members = [np.flatnonzero(market.universe == u) for u in np.unique(market.universe)]
    tables = []
    for shift, grid in enumerate(grids):
        for a, b in grid:
            if b > market.n_weeks:
                raise ValueError(f"interval ({a}, {b}) runs past the last week {market.n_weeks}")
            feats = asset_features(market, int(a), emas)
            ret = logp[:, b] - logp[:, a]
            labels = np.empty(n, dtype=np.int64)
            for idx in members:
                labels[idx] = quintile_labels(ret[idx])
            tables.append(FeatureTable(ids.copy(), market.universe.copy(), np.full(n, shift),
                                       np.full(n, a), np.full(n, b), labels, feats))
    if not tables:
        raise ValueError("no intervals in the given grids")
    return FeatureTable.concat(tables)


@dataclass
class Normalizer:
    median: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray) -> "Normalizer":
        med = np.nanmedian(features, axis=0)
        med = np.where(np.isnan(med), 0.0, med)
        filled = np.where(np.isnan(features), med, features)
        mean = filled.mean(axis=0)
        std = filled.std(axis=0)
        return cls(med, mean, np.where(std > 0, std, 1.0))

    def transform(self, features: np.ndarray) -> np.ndarray:
        filled = np.where(np.isnan(features), self.median, features)
        return (filled - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"median": self.median.tolist(), "mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(*(np.asarray(d[k], dtype=np.float64) for k in ("median", "mean", "std")))


# tasks and training ------------------------------------------------------------------

def zero_return_frequencies(table: FeatureTable, market: Market) -> np.ndarray:
    """How often a zero 4-week return lands in each quintile, over the table's intervals."""
    logp = np.log(market.prices)
    counts = np.zeros(N_QUINTILES)
    keys = sorted({(int(u), int(a), int(b)) for u, a, b in
                   zip(table.universe_id, table.interval_start, table.interval_end)})
    for u, a, b in keys:
        ret = np.sort(logp[market.universe == u, b] - logp[market.universe == u, a])
        # a zero return ranks after strictly negative returns
        rank = int(np.searchsorted(ret, 0.0, side="left"))
        counts[min(rank, UNIVERSE_SIZE - 1) // (UNIVERSE_SIZE // N_QUINTILES)] += 1
    return counts / counts.sum() if counts.sum() else np.full(N_QUINTILES, 1.0 / N_QUINTILES)


def make_tasks(table: FeatureTable, normalizer: Normalizer, n_assets: int, val_fraction: float = 0.2
               ) -> list[Task]:
    """One task per asset; the most recent ``val_fraction`` of its rows are held out."""
    x = normalizer.transform(table.features)
    y = one_hot(table.labels)
    tasks = []
    for m in range(n_assets):
        idx = np.flatnonzero(table.asset_id == m)
        idx = idx[np.lexsort((table.shift[idx], table.interval_start[idx]))]
        n_val = int(np.floor(val_fraction * len(idx)))
        tasks.append(Task(x[idx], y[idx], len(idx) - n_val))
    return tasks


@dataclass
class QuintileConfig:
    n_assets: int = 1000
    n_weeks: int = 260
    test_weeks: int = 52
    hidden: tuple[int, ...] = (32, 8)
    dropout: float = 0.2
    d_theta: int = 1
    val_fraction: float = 0.2
    phase1: Phase1Config = field(default_factory=Phase1Config)
    phase2: Phase2Config = field(default_factory=Phase2Config)
    market: SynthMarketConfig = field(default_factory=SynthMarketConfig)


@dataclass
class QuintileRun:
    model: MtMsModel
    market: Market
    train_table: FeatureTable
    test_table: FeatureTable
    normalizer: Normalizer


def fit_quintile_model(config: QuintileConfig, seed: int) -> QuintileRun:
    """Simulate a market, build features, train phase 1 and phase 2."""
    ss = np.random.SeedSequence(seed)
    market_seed, universe_seed, train_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    market = synth_market(config.n_assets, config.n_weeks, market_seed, config.market)
    market = assign_universes(market, universe_seed)
    split = config.n_weeks - config.test_weeks
    train = build_features(market, augment_time_shift(config.n_weeks, HISTORY_WEEKS, split))
    test = build_features(market, [interval_grid(config.n_weeks, 0, split)])
    normalizer = Normalizer.fit(train.features)
    tasks = make_tasks(train, normalizer, market.n_assets, config.val_fraction)
    bundle = TaskBundle(tasks)
    base = MlpSpec((len(FEATURE_NAMES), *config.hidden, N_QUINTILES), activation="leaky_relu",
                   output_transform="softmax", dropout_rate=config.dropout)
    rng = np.random.default_rng(train_seed)
    beta, res1 = train_phase1(bundle, base, "rps", config.phase1, rng)
    log.info("phase 1: best val RPS %.5f after %d epochs", res1.best_loss, len(res1.trace))
    model = init_phase2(base, beta, market.n_assets, config.d_theta, Connection.last_layer(base), rng=rng,
                        bound=config.phase2.meta_init_bound)
    model, res2 = train_phase2(bundle, model, "rps", config.phase2, rng)
    log.info("phase 2: best val RPS %.5f after %d epochs", res2.best_loss, len(res2.trace))
    # assets whose price never moved during training bypass the network
    degenerate = np.flatnonzero(np.all(np.diff(market.prices[:, :split + 1], axis=1) == 0, axis=1))
    model.norm_stats = {
        "features": list(FEATURE_NAMES),
        **normalizer.to_dict(),
        "degenerate_assets": degenerate.tolist(),
        "degenerate_freq": zero_return_frequencies(train, market).tolist(),
    }
    return QuintileRun(model, market, train, test, normalizer)


# prediction and evaluation -------------------------------------------------------------

def predict_quintiles(model: MtMsModel, asset_ids, raw_features) -> np.ndarray:
    """Quintile probabilities per row, with the constant-asset override."""
    asset_ids = np.asarray(asset_ids, dtype=np.int64)
    stats = model.norm_stats
    for key in ("median", "mean", "std"):
        if key not in stats:
            raise KeyError(f"checkpoint normalization stats lack {key!r}")
    x = Normalizer.from_dict(stats).transform(np.asarray(raw_features, dtype=np.float64))
    out = np.empty((len(asset_ids), N_QUINTILES))
    if len(asset_ids):
        bad = (asset_ids < 0) | (asset_ids >= model.n_tasks)
        if bad.any():
            raise IndexError(f"asset id {int(asset_ids[bad][0])} outside [0, {model.n_tasks})")
        uniq, inv = np.unique(asset_ids, return_inverse=True)
        groups = [np.flatnonzero(inv == k) for k in range(len(uniq))]
        preds = predict_many(model, uniq.tolist(), [x[g] for g in groups])
        for g, p in zip(groups, preds):
            out[g] = p
    degenerate = np.isin(asset_ids, np.asarray(stats.get("degenerate_assets", []), dtype=np.int64))
    if degenerate.any():
        out[degenerate] = np.asarray(stats["degenerate_freq"], dtype=np.float64)
    return out


@dataclass
class RpsReport:
    aggregate: float
    per_interval: dict[int, float]
    scatter: np.ndarray          # (n_assets, 5) mean predicted probabilities per asset
    corr_q1_q5: float
    corr_q2_q4: float


def evaluate_rps(model: MtMsModel, table: FeatureTable, universe: int = 0,
                 probs: np.ndarray | None = None) -> RpsReport:
    """RPS on the rows of one universe (the primary one by default)."""
    rows = table.subset(table.universe_id == universe)
    if len(rows) == 0:
        raise ValueError(f"no rows for universe {universe}")
    p = predict_quintiles(model, rows.asset_id, rows.features) if probs is None else probs
    # renormalise away last-bit rounding before the simplex check
    p = p / p.sum(axis=1, keepdims=True)
    scores = rps(p, one_hot(rows.labels))
    per_interval = {int(a): float(scores[rows.interval_start == a].mean()) for a in np.unique(rows.interval_start)}
    assets = np.unique(rows.asset_id)
    scatter = np.stack([p[rows.asset_id == a].mean(axis=0) for a in assets])
    corr = lambda i, j: float(np.corrcoef(scatter[:, i], scatter[:, j])[0, 1]) \
        if scatter[:, i].std() > 0 and scatter[:, j].std() > 0 else 0.0
    return RpsReport(float(scores.mean()), per_interval, scatter, corr(0, 4), corr(1, 3))


# csv -------------------------------------------------------------------------------------

LABEL_COLUMNS = tuple(f"q{k}" for k in range(1, N_QUINTILES + 1))
ID_COLUMNS = ("asset_id", "universe_id", "shift", "interval_start")


def write_feature_csv(table: FeatureTable, path) -> None:
    y = one_hot(table.labels)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*ID_COLUMNS, *LABEL_COLUMNS, *table.names])
        for i in range(len(table)):
            w.writerow([int(table.asset_id[i]), int(table.universe_id[i]), int(table.shift[i]),
                        int(table.interval_start[i]), *(int(v) for v in y[i]),
                        *(repr(float(v)) for v in table.features[i])])


def read_feature_csv(path, names: tuple[str, ...] = FEATURE_NAMES) -> tuple[np.ndarray, np.ndarray]:
    """(asset ids, raw feature matrix) from a feature CSV; missing columns are reported by name."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path} is empty") from None
        for col in ("asset_id", *names):
            if col not in header:
                raise ValueError(f"feature file {path} lacks column {col!r}")
        pos = [header.index(c) for c in names]
        aid = header.index("asset_id")
        ids, rows = [], []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}")
            try:
                ids.append(int(rec[aid]))
                rows.append([float(rec[p]) for p in pos])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return np.asarray(ids, dtype=np.int64), np.asarray(rows, dtype=np.float64).reshape(-1, len(names))


def write_submission(asset_ids, probs, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["asset_id", *(f"Rank{k}" for k in range(1, N_QUINTILES + 1))])
        for a, p in zip(asset_ids, probs):
            w.writerow([int(a), *(repr(float(v)) for v in p)])
