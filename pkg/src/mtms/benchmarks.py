"""Experiment drivers: sine regression, M4-like localisation, quintile forecasting.

Each driver returns a :class:`BenchmarkReport`; :func:`write_report` turns it
into a per-task CSV and a JSON summary.  Wall-clock time is kept on the
report object but never written, so reruns produce identical files.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mtms.config import substream
from mtms.linear import (SeriesSet, adapt_series, als_fit, cluster_fit, forecast_recursive, lag_matrix,
                         pooled_ols)
from mtms.losses import SEASONAL_PERIOD, mase, mase_scale
from mtms.model import (AdaptConfig, Connection, MtMsGraph, MtMsModel, Phase1Config, Phase2Config, Task,
                        TaskBundle, _Packed, _stack_rows, adapt_tasks, init_phase2, predict_many, task_weights,
                        train_phase1, train_phase2)
from mtms.nn import MlpSpec, ParamVector
from mtms.optim import AdamState, train_loop
from mtms.quintile import QuintileConfig, SynthMarketConfig, evaluate_rps, fit_quintile_model

log = logging.getLogger(__name__)


@dataclass
class MethodResult:
    mean: float
    ci95: float
    per_task: np.ndarray

    @classmethod
    def from_losses(cls, losses) -> "MethodResult":
        losses = np.asarray(losses, dtype=np.float64)
        se = losses.std(ddof=1) / np.sqrt(len(losses)) if len(losses) > 1 else 0.0
        return cls(float(losses.mean()), float(1.96 * se), losses)


@dataclass
class BenchmarkReport:
    name: str
    metric: str
    methods: dict[str, MethodResult]
    seed: int
    config: dict
    extra: dict = field(default_factory=dict)
    runtime: float = 0.0


def _jsonable(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {k: _jsonable(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_report(report: BenchmarkReport, out_dir, stem: str | None = None) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = stem or report.name
    csv_path, json_path = out / f"{stem}_losses.csv", out / f"{stem}_summary.json"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "task", report.metric])
        for name, res in report.methods.items():
            for i, v in enumerate(res.per_task):
                w.writerow([name, i, repr(float(v))])
    doc = {
        "benchmark": report.name,
        "metric": report.metric,
        "seed": report.seed,
        "config": _jsonable(report.config),
        "methods": {k: {"mean": v.mean, "ci95": v.ci95, "n_tasks": int(len(v.per_task))}
                    for k, v in report.methods.items()},
        "extra": _jsonable(report.extra),
    }
    json_path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return csv_path, json_path


# sine regression -----------------------------------------------------------------

@dataclass
class SineConfig:
    k: int = 5
    m_train: int = 1000
    m_eval: int = 600
    n_val: int = 100
    hidden: tuple[int, ...] = (40, 40)
    d_theta: int = 2
    connect: str = "last"
    phase1: Phase1Config = field(default_factory=lambda: Phase1Config(lr=0.001, batch_size=200))
    # the 0.01 stage gets through the early transient where validation loss rises
    phase2: Phase2Config = field(default_factory=lambda: Phase2Config(ladder=(0.01, 0.001), batch_tasks=100,
                                                                      patience=60, max_epochs=300))
    adapt: AdaptConfig = field(default_factory=AdaptConfig)


def sine_tasks(n_tasks: int, k: int, n_val: int, rng: np.random.Generator) -> tuple[list[Task], np.ndarray]:
    """Tasks ``y = A sin(x + b)`` with ``k`` training and ``n_val`` validation points.

    Returns the tasks and their ``(A, b)`` pairs.
    """
    params = np.empty((n_tasks, 2))
    tasks = []
    for m in range(n_tasks):
        a = rng.uniform(0.1, 5.0)
        b = rng.uniform(0.0, np.pi)
        x = rng.uniform(-5.0, 5.0, size=k + n_val)
        tasks.append(Task(x[:, None], a * np.sin(x + b), k))
        params[m] = a, b
    return tasks, params


def train_sine_model(config: SineConfig, seed: int) -> tuple[MtMsModel, list[Task], np.ndarray]:
    tasks, params = sine_tasks(config.m_train, config.k, config.n_val, substream(seed, "train_tasks"))
    bundle = TaskBundle(tasks)
    base = MlpSpec((1, *config.hidden, 1), activation="relu")
    rng = substream(seed, "init")
    beta, res1 = train_phase1(bundle, base, "mse", config.phase1, rng)
    log.info("sine phase 1: val MSE %.4f after %d epochs", res1.best_loss, len(res1.trace))
    conn = Connection.all_layers(base) if config.connect == "all" else Connection.last_layer(base)
    model = init_phase2(base, beta, len(tasks), config.d_theta, conn, rng=rng,
                        bound=config.phase2.meta_init_bound)
    model, res2 = train_phase2(bundle, model, "mse", config.phase2, substream(seed, "shuffle"))
    log.info("sine phase 2: val MSE %.4f after %d epochs", res2.best_loss, len(res2.trace))
    return model, tasks, params


def evaluate_sine(model: MtMsModel, tasks: list[Task], config: AdaptConfig, rng: np.random.Generator
                  ) -> np.ndarray:
    """Adapt a mesa vector per task on its training points and score MSE on the rest."""
    for t in tasks:
        if t.x_train.shape[0] != tasks[0].x_train.shape[0]:
            raise ValueError("all evaluation tasks must have the same number of training points")
    thetas = adapt_tasks(model, tasks, "mse", config, rng)
    preds = predict_many(model, list(range(len(tasks))), [t.x_val for t in tasks], mesa=thetas)
    return np.array([np.mean((p - t.y_val) ** 2) for p, t in zip(preds, tasks)])


def run_sinusoidal(config: SineConfig | None = None, seed: int = 0) -> tuple[BenchmarkReport, MtMsModel]:
    config = config or SineConfig()
    t0 = time.perf_counter()
    model, _, _ = train_sine_model(config, seed)
    eval_tasks, _ = sine_tasks(config.m_eval, config.k, config.n_val, substream(seed, "eval_tasks"))
    losses = evaluate_sine(model, eval_tasks, config.adapt, substream(seed, "adapt"))
    report = BenchmarkReport(f"sin_k{config.k}", "mse", {"mtms": MethodResult.from_losses(losses)},
                             seed, dataclasses.asdict(config),
                             {"adapt_points_per_task": config.k})
    report.runtime = time.perf_counter() - t0
    return report, model


def sweep_mesa(model: MtMsModel, n_values: int = 11, n_x: int = 201, span: float = 2.0
               ) -> dict[str, np.ndarray]:
    """Prediction curves over ``x`` in [-5, 5] while one mesa coordinate varies.

    Coordinate ``j`` sweeps ``median +- span * std`` of the trained mesa
    column with every other coordinate at its median.  Returns ``x`` and one
    ``(n_values, n_x)`` curve array per coordinate, plus the swept values.
    """
    x = np.linspace(-5.0, 5.0, n_x)
    med = np.median(model.mesa, axis=0)
    sd = model.mesa.std(axis=0)
    out: dict[str, np.ndarray] = {"x": x}
    for j in range(model.d_theta):
        grid = med[j] + np.linspace(-span, span, n_values) * (sd[j] if sd[j] > 0 else 1.0)
        thetas = np.repeat(med[None, :], n_values, axis=0)
        thetas[:, j] = grid
        curves = predict_many(model, list(range(n_values)), [x[:, None]] * n_values, mesa=thetas)
        out[f"theta{j}_values"] = grid
        out[f"theta{j}_curves"] = np.stack([c[:, 0] for c in curves])
    return out


def write_curves(curves: dict[str, np.ndarray], path) -> None:
    x = curves["x"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["coordinate", "theta_value", "x", "prediction"])
        j = 0
        while f"theta{j}_curves" in curves:
            for v, row in zip(curves[f"theta{j}_values"], curves[f"theta{j}_curves"]):
                for xi, yi in zip(x, row):
                    w.writerow([j, repr(float(v)), repr(float(xi)), repr(float(yi))])
            j += 1


# M4-like localisation ---------------------------------------------------------------

@dataclass
class M4LikeConfig:
    n_series: int = 200
    length: int = 60
    horizon: int = 6
    d_x: int = 12
    freq: str = "monthly"
    families: tuple[str, ...] = ("ar", "seasonal")
    noise: float = 0.3
    d_thetas: tuple[int, ...] = (0, 1, 2)
    ks: tuple[int, ...] = (1, 2, 4)
    finetune: bool = True
    finetune_lr: float = 1e-4
    finetune_epochs: int = 300
    min_length: int | None = None


def synth_series(config: M4LikeConfig, rng: np.random.Generator) -> tuple[list[np.ndarray], np.ndarray]:
    """Series from the configured families; returns the series and their family index.

    ``ar``: AR(1) around a level with persistence in [0.2, 0.95].
    ``seasonal``: fixed monthly pattern plus white noise.
    """
    period = max(SEASONAL_PERIOD.get(config.freq, 1), 2)
    series, fam = [], []
    for i in range(config.n_series):
        f = i % len(config.families)
        kind = config.families[f]
        n = config.length + config.horizon
        level = rng.uniform(5.0, 20.0)
        e = config.noise * rng.standard_normal(n)
        if kind == "ar":
            phi = rng.uniform(0.2, 0.95)
            y = np.empty(n)
            y[0] = e[0]
            for t in range(1, n):
                y[t] = phi * y[t - 1] + e[t]
            y = level + y
        elif kind == "seasonal":
            pattern = rng.normal(0.0, 1.0, period)
            y = level + np.tile(pattern, n // period + 1)[:n] + e
        else:
            raise ValueError(f"unknown series family {kind!r}")
        series.append(y)
        fam.append(f)
    return series, np.array(fam)


def _mase_finetune(data: SeriesSet, model, config: M4LikeConfig, rng: np.random.Generator):
    """Refine (omega_b, omega_w, thetas) of a linear fit under absolute error."""
    from mtms.linear import LinearMtMs

    p = data.n_coef
    d = model.d_theta
    base = MlpSpec((data.d_x, 1), activation="none")
    meta = MlpSpec((d, p), activation="none")
    conn = Connection.all_layers(base)
    # g outputs (W0 as a column, then b0); coefficient 0 of the linear model is the intercept
    order = np.r_[1:p, 0]
    omega = ParamVector.flatten({"W0": model.omega_w[order].T.copy(), "b0": model.omega_b[order][None, :].copy()},
                                meta.layout())
    _, orph = conn.split(base)
    mtms = MtMsModel(base, meta, conn, omega, ParamVector(np.zeros(0), orph), model.thetas.copy())
    tasks = [Task(X[:, 1:], y) for X, y in (data.design(m) for m in range(len(data)))]
    graph = MtMsGraph(base, meta, conn, loss="mae")
    packed = _Packed(mtms)
    x, yv, seg, counts = _stack_rows(tasks, "train")
    w = task_weights(counts, 1)
    ids = np.arange(len(tasks))

    def objective(flat, _batch, _r):
        om, orp, mesa = packed.unpack(flat)
        val = float(graph.tape.forward(graph.bindings(om, orp, mesa, x, seg, ids, yv, w))[0, 0])
        return val, packed.grad_flat(graph.tape.backward())

    # scoring the starting point lets early stopping keep the ALS solution if nothing improves
    val_fn = lambda flat: objective(flat, None, None)[0]
    res = train_loop(objective, packed.pack(), lambda r: [None], AdamState(lr=config.finetune_lr), rng,
                     val_fn=val_fn, patience=20, max_epochs=config.finetune_epochs)
    om, _, mesa = packed.unpack(res.params)
    v = om.views()
    inv = np.argsort(order)
    return LinearMtMs(v["b0"][0][inv].copy(), v["W0"].T[inv].copy(), mesa.copy(),
                      model.history, model.rank_deficient, model.n_iter)


def _forecast_mase(series: list[np.ndarray], betas: np.ndarray, config: M4LikeConfig, scales) -> np.ndarray:
    out = np.empty(len(series))
    for m, y in enumerate(series):
        train, test = y[:-config.horizon], y[-config.horizon:]
        fc = forecast_recursive(betas[m], train / scales[m], config.horizon) * scales[m]
        out[m] = mase(fc, test, scales[m])
    return out


def run_m4like(config: M4LikeConfig | None = None, seed: int = 0,
               series: list[np.ndarray] | None = None) -> BenchmarkReport:
    """Pooled, clustered and mesa-localised AR models on the same series.

    Series too short for ``d_x`` lags plus the horizon are skipped with a
    warning.  Scores are MASE of recursive forecasts over the last
    ``horizon`` values of each series.
    """
    config = config or M4LikeConfig()
    t0 = time.perf_counter()
    if series is None:
        series, families = synth_series(config, substream(seed, "series"))
    else:
        families = np.zeros(len(series), dtype=np.int64)
    period = SEASONAL_PERIOD.get(config.freq, 1)
    min_len = config.min_length or (config.d_x + config.horizon + max(period, 1) + 2)
    keep = [i for i, s in enumerate(series) if len(s) >= min_len]
    if len(keep) < len(series):
        warnings.warn(f"skipped {len(series) - len(keep)} series shorter than {min_len}", RuntimeWarning,
                      stacklevel=2)
    series = [np.asarray(series[i], dtype=np.float64) for i in keep]
    families = families[keep]
    if not series:
        raise ValueError("no series long enough to evaluate")
    train = [s[:-config.horizon] for s in series]
    data = SeriesSet.from_raw(train, config.d_x, config.freq)
    scales = [mase_scale(t, period) for t in train]

    methods: dict[str, MethodResult] = {}
    methods["pooled"] = MethodResult.from_losses(
        _forecast_mase(series, np.repeat(pooled_ols(data)[None, :], len(series), 0), config, scales))
    for k in config.ks:
        if k > len(series):
            continue
        cm = cluster_fit(data, k, substream(seed, f"kmeans{k}"))
        methods[f"cluster_k{k}"] = MethodResult.from_losses(_forecast_mase(series, cm.betas(), config, scales))
    for d in config.d_thetas:
        lm = als_fit(data, d, rng=substream(seed, f"als{d}"))
        methods[f"mtms_als_d{d}"] = MethodResult.from_losses(_forecast_mase(series, lm.betas(), config, scales))
        if config.finetune and d > 0:
            ft = _mase_finetune(data, lm, config, substream(seed, f"finetune{d}"))
            methods[f"mtms_d{d}"] = MethodResult.from_losses(_forecast_mase(series, ft.betas(), config, scales))
    report = BenchmarkReport("m4like", "mase", methods, seed, dataclasses.asdict(config),
                             {"n_series": len(series), "families": families.tolist()})
    report.runtime = time.perf_counter() - t0
    return report


# quintile forecasting ----------------------------------------------------------------

def run_quintile(config: QuintileConfig | None = None, seed: int = 0):
    """Full synthetic quintile pipeline; RPS on held-out intervals of the primary universe."""
    config = config or QuintileConfig()
    t0 = time.perf_counter()
    run = fit_quintile_model(config, seed)
    rep = evaluate_rps(run.model, run.test_table)
    rows = run.test_table.subset(run.test_table.universe_id == 0)
    uniform = MethodResult.from_losses(np.full(len(rep.per_interval), 0.16))
    per_interval = np.array([rep.per_interval[k] for k in sorted(rep.per_interval)])
    report = BenchmarkReport("quintile", "rps", {"mtms": MethodResult.from_losses(per_interval),
                                                 "uniform": uniform},
                             seed, dataclasses.asdict(config),
                             {"aggregate_rps": rep.aggregate, "corr_q1_q5": rep.corr_q1_q5,
                              "corr_q2_q4": rep.corr_q2_q4, "n_test_rows": len(rows),
                              "scatter": rep.scatter})
    report.runtime = time.perf_counter() - t0
    return report, run
