"""End-to-end acceptance checks at full size.

Each test records one PASS/FAIL line, repeated in the terminal summary.
The benchmark runs go through the command-line entry point so that the
files they write can be compared byte for byte on a second run.
"""
import json
import time

import numpy as np
import pytest
from conftest import record_acceptance

from mtms.autodiff import Tape, gradient_check
from mtms.benchmarks import sine_tasks
from mtms.cli import main
from mtms.config import substream
from mtms.linear import SeriesSet, als_fit, per_series_ols, pooled_ols
from mtms.losses import one_hot, rps
from mtms.model import load_checkpoint, predict_many
from mtms.prop1 import run_instances

RUNS = {
    "sin_k5": ["sin", "--k", "5", "--seed", "0"],
    "sin_k10": ["sin", "--k", "10", "--seed", "0"],
    "m4like": ["m4like", "--seed", "0"],
    "quintile": ["quintile", "--seed", "0"],
    "quintile_flat": ["quintile", "--homogeneous", "--seed", "0"],
    "prop1": ["prop1", "--seed", "0"],
    "scale": ["portfolio-scale", "--seed", "0"],
    "sim": ["portfolio-sim", "--seed", "0"],
}


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    """Run each benchmark once on first use; returns (output dir, seconds)."""
    base = tmp_path_factory.mktemp("first")
    done = {}

    def get(name):
        if name not in done:
            out = base / name
            t0 = time.perf_counter()
            code = main([*RUNS[name], "--out", str(out)])
            assert code == 0, f"{name} exited with {code}"
            done[name] = (out, time.perf_counter() - t0)
        return done[name]

    return get


def _summary(out, stem):
    return json.loads((out / f"{stem}_summary.json").read_text())


# 1 -------------------------------------------------------------------------------

def test_sine_regression(runs):
    (d5, t5), (d10, t10) = runs("sin_k5"), runs("sin_k10")
    k5 = _summary(d5, "sin_k5")["methods"]["mtms"]
    k10 = _summary(d10, "sin_k10")["methods"]["mtms"]
    ok = k5["mean"] <= 0.05 and k10["mean"] <= 0.03 and t5 + t10 <= 1800 and k5["n_tasks"] == 600
    record_acceptance(1, ok, f"sine MSE K=5 {k5['mean']:.4f} +- {k5['ci95']:.4f}, "
                             f"K=10 {k10['mean']:.4f} +- {k10['ci95']:.4f}, {t5 + t10:.0f}s")
    assert ok


def test_mesa_sweep_tracks_training_tasks(runs):
    out, _ = runs("sin_k5")
    model = load_checkpoint(out / "sin_k5_checkpoint.json")
    _, params = sine_tasks(1000, 5, 100, substream(0, "train_tasks"))
    x = np.linspace(-5, 5, 201)
    ids = list(range(20))
    curves = predict_many(model, ids, [x[:, None]] * len(ids))
    rms = [np.sqrt(np.mean((c[:, 0] - a * np.sin(x + b)) ** 2)) for c, (a, b) in zip(curves, params[ids])]
    assert max(rms) < 0.1
    rows = (out / "sin_k5_curves.csv").read_text().splitlines()
    assert len(rows) == 1 + 2 * 11 * 201


# 2 -------------------------------------------------------------------------------

def test_bilevel_equals_single_level():
    t0 = time.perf_counter()
    results = run_instances(100, np.random.default_rng(2024))
    n_equal = sum(r.equal for r in results)
    ok = n_equal == 100 and all(r.inner_unique for r in results)
    record_acceptance(2, ok, f"argmin sets equal on {n_equal}/100 instances ({time.perf_counter() - t0:.1f}s)")
    assert ok


# 3 and 4 -------------------------------------------------------------------------

def _random_series_sets(seed, n_sets=50):
    rng = np.random.default_rng(seed)
    for _ in range(n_sets):
        d_x = int(rng.integers(1, 5))
        series = []
        for _ in range(int(rng.integers(3, 10))):
            n = int(rng.integers(3 * (d_x + 1) + 5, 60))
            phi = rng.uniform(-0.9, 0.95)
            y = np.empty(n)
            y[0] = rng.standard_normal()
            for t in range(1, n):
                y[t] = phi * y[t - 1] + rng.standard_normal()
            series.append(rng.uniform(-5, 5) + y)
        yield SeriesSet(series, d_x)


def test_linear_endpoints():
    worst_pooled = worst_local = 0.0
    for data in _random_series_sets(31):
        pooled = als_fit(data, 0)
        worst_pooled = max(worst_pooled, np.max(np.abs(pooled.omega_b - pooled_ols(data))))
        full = als_fit(data, data.n_coef)
        for m, (fit, beta) in enumerate(zip(full.fitted(data), per_series_ols(data))):
            worst_local = max(worst_local, np.max(np.abs(fit - data.design(m)[0] @ beta)))
    ok = worst_pooled <= 1e-6 and worst_local <= 1e-6
    record_acceptance(3, ok, f"max-abs gap to pooled OLS {worst_pooled:.1e}, to per-series fit {worst_local:.1e}")
    assert ok


def test_als_monotone():
    worst = -np.inf
    n_runs = 0
    for data in _random_series_sets(32):
        for d in range(data.n_coef + 1):
            h = np.asarray(als_fit(data, d, rng=np.random.default_rng(d)).history)
            rise = (h[1:] - h[:-1]) / np.maximum(h[:-1], np.finfo(float).tiny)
            worst = max(worst, rise.max(initial=-np.inf))
            n_runs += 1
    ok = worst <= 1e-12
    record_acceptance(4, ok, f"largest relative half-step increase {worst:.1e} over {n_runs} fits")
    assert ok


# 5 -------------------------------------------------------------------------------

def _random_network(rng):
    sizes = [int(rng.integers(1, 6)) for _ in range(4)]
    acts = rng.choice(["tanh", "leaky_relu", "sin", "relu"], size=2)
    t = Tape()
    h = t.input("x")
    bindings = {"x": rng.standard_normal((int(rng.integers(1, 8)), sizes[0]))}
    for layer in range(3):
        w, b = t.input(f"W{layer}"), t.input(f"b{layer}")
        bindings[f"W{layer}"] = rng.standard_normal((sizes[layer], sizes[layer + 1]))
        bindings[f"b{layer}"] = rng.standard_normal((1, sizes[layer + 1]))
        h = t.add_bias(t.matmul(h, w), b)
        if layer < 2:
            h = t.leaky_relu(h, 0.01) if acts[layer] == "leaky_relu" else getattr(t, acts[layer])(h)
    if rng.random() < 0.5:
        y = t.input("y")
        bindings["y"] = rng.standard_normal((bindings["x"].shape[0], sizes[3]))
        t.mean(t.square(t.sub(h, y)))
    else:
        t.sum(t.log(t.softmax_rows(h)))
    return t, bindings


def test_gradient_check():
    worst = max(gradient_check(*_random_network(np.random.default_rng(1000 + s))) for s in range(100))
    ok = worst <= 1e-4
    record_acceptance(5, ok, f"max relative gradient error {worst:.1e} over 100 networks")
    assert ok


# 6 -------------------------------------------------------------------------------

def test_rps_calibration():
    uniform = np.full((5, 5), 0.2)
    per_outcome = rps(uniform, one_hot(np.arange(1, 6)))
    mean = float(per_outcome.mean())
    ok = abs(mean - 0.16) <= 1e-12 and np.allclose(per_outcome, [0.24, 0.12, 0.08, 0.12, 0.24], rtol=0,
                                                     atol=1e-12)
    record_acceptance(6, ok, f"uniform RPS {mean:.15f}, per outcome {np.round(per_outcome, 12).tolist()}")
    assert ok


# 7 -------------------------------------------------------------------------------

def test_quintile_rps(runs):
    het = _summary(runs("quintile")[0], "quintile")["extra"]
    flat = _summary(runs("quintile_flat")[0], "quintile")["extra"]
    ok = het["aggregate_rps"] < 0.155 and 0.158 <= flat["aggregate_rps"] <= 0.162
    record_acceptance(7, ok, f"held-out RPS {het['aggregate_rps']:.5f} heterogeneous, "
                             f"{flat['aggregate_rps']:.5f} homogeneous")
    assert ok


def test_quintile_predictions_traverse_diagonal(runs):
    het = _summary(runs("quintile")[0], "quintile")["extra"]
    assert het["corr_q1_q5"] > 0


# 8 -------------------------------------------------------------------------------

def test_scaling(runs):
    doc = json.loads((runs("scale")[0] / "scaling_summary.json").read_text())
    frac, r2 = doc["frac_low_beats_high"], doc["r2"]
    ok = doc["n_paths"] == 1000 and frac >= 0.95 and r2 >= 0.99
    record_acceptance(8, ok, f"IR(0.25) > IR(1) on {frac:.1%} of paths, linear fit R^2 {r2:.5f}")
    assert ok


# 9 -------------------------------------------------------------------------------

def test_adversarial_policy(runs):
    out, seconds = runs("sim")
    doc = json.loads((out / "simulation_summary.json").read_text())
    s = doc["summary"]
    adaptive, static = s["adaptive"], s["static"]
    lo, hi = s["diff_top20_adaptive_minus_static"]["ci95"]
    ok = (doc["replications"] >= 10_000 and adaptive["p_top20"] > static["p_top20"] and lo > 0
          and adaptive["mean_cumulative_return"] < static["mean_cumulative_return"] and seconds <= 600)
    record_acceptance(9, ok, f"P(top 20) adaptive {adaptive['p_top20']:.4f} vs static {static['p_top20']:.4f}, "
                             f"diff CI [{lo:.4f}, {hi:.4f}], mean return {adaptive['mean_cumulative_return']:.4f} "
                             f"vs {static['mean_cumulative_return']:.4f}, {seconds:.0f}s")
    assert ok


# 10 ------------------------------------------------------------------------------

def test_reruns_are_byte_identical(runs, tmp_path):
    mismatched, n_files = [], 0
    for name, argv in RUNS.items():
        first, _ = runs(name)
        second = tmp_path / name
        assert main([*argv, "--out", str(second)]) == 0
        names = sorted(p.name for p in first.iterdir())
        if names != sorted(p.name for p in second.iterdir()):
            mismatched.append(f"{name}: file lists differ")
            continue
        for f in names:
            n_files += 1
            if (first / f).read_bytes() != (second / f).read_bytes():
                mismatched.append(f"{name}/{f}")
    ok = not mismatched
    record_acceptance(10, ok, f"{n_files} output files across {len(RUNS)} benchmarks"
                              + ("" if ok else f"; differing: {', '.join(mismatched)}"))
    assert ok
