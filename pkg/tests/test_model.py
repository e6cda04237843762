import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mtms.linear import SeriesSet, als_fit, sse
from mtms.model import (AdaptConfig, CheckpointError, Connection, MtMsModel, Phase1Config, Phase2Config, Task,
                        TaskBundle, adapt_new_task, adapt_tasks, beta_from_theta, init_phase2, load_checkpoint,
                        lookup_beta, lookup_beta_onehot, mtms_loss, predict, predict_many, save_checkpoint,
                        train_phase1, train_phase2)
from mtms.nn import MlpSpec, ParamVector, init_params, mlp_forward


def small_model(rng, d_theta=2, base=(3, 4, 2), n_tasks=5, softmax=False, meta_hidden=()):
    spec = MlpSpec(base, output_transform="softmax" if softmax else "none")
    beta = init_params(spec, "xavier_uniform", rng)
    model = init_phase2(spec, beta, n_tasks, d_theta, rng=rng, meta_hidden=meta_hidden)
    model.mesa = rng.standard_normal(model.mesa.shape)
    return model, beta


def linear_tasks(slopes, n=40, rng=None, noise=0.0):
    rng = rng or np.random.default_rng(0)
    tasks = []
    for s in slopes:
        x = rng.uniform(-1, 1, (n, 1))
        tasks.append(Task(x, s * x[:, 0] + noise * rng.standard_normal(n)))
    return tasks


def test_zero_mesa_zero_weights_gives_bias():
    rng = np.random.default_rng(0)
    model, _ = small_model(rng)
    model.mesa[:] = 0
    model.omega.views()["W0"][...] = 0
    beta = lookup_beta(model, 2).views()
    np.testing.assert_array_equal(np.concatenate([beta["W1"].ravel(), beta["b1"].ravel()]),
                                  model.omega.views()["b0"][0])


def test_no_mesa_dimension_shares_beta():
    rng = np.random.default_rng(1)
    model, _ = small_model(rng, d_theta=0)
    assert np.array_equal(lookup_beta(model, 0).flat, lookup_beta(model, 4).flat)


def test_linear_g_unit_theta():
    rng = np.random.default_rng(2)
    model, _ = small_model(rng)
    out = beta_from_theta(model, [1.0, 0.0]).views()
    conn = np.concatenate([out["W1"].ravel(), out["b1"].ravel()])
    v = model.omega.views()
    np.testing.assert_allclose(conn, v["b0"][0] + v["W0"][0], atol=1e-15)


def test_orphaned_blocks_pass_through():
    rng = np.random.default_rng(3)
    model, beta = small_model(rng)
    got = lookup_beta(model, 1).views()
    assert np.array_equal(got["W0"], beta.views()["W0"])
    assert np.array_equal(got["b0"], beta.views()["b0"])


def test_lookup_rejects_bad_index():
    model, _ = small_model(np.random.default_rng(4))
    with pytest.raises(IndexError):
        lookup_beta(model, 5)
    with pytest.raises(IndexError):
        predict(model, -1, np.zeros((1, 3)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 3), st.sampled_from([(), (4,)]))
def test_one_hot_equivalence(seed, d_theta, hidden):
    rng = np.random.default_rng(seed)
    model, _ = small_model(rng, d_theta=d_theta, meta_hidden=hidden)
    m = int(rng.integers(model.n_tasks))
    assert np.array_equal(lookup_beta(model, m).flat, lookup_beta_onehot(model, m).flat)


def test_predict_matches_explicit_beta():
    rng = np.random.default_rng(5)
    model, _ = small_model(rng, meta_hidden=(3,))
    x = rng.standard_normal((7, 3))
    for m in range(model.n_tasks):
        expected = mlp_forward(model.base_spec, lookup_beta(model, m), x)
        np.testing.assert_allclose(predict(model, m, x), expected, atol=1e-12)


def test_identical_mesa_rows_identical_predictions():
    rng = np.random.default_rng(6)
    model, _ = small_model(rng)
    model.mesa[3] = model.mesa[1]
    x = rng.standard_normal((4, 3))
    assert np.array_equal(predict(model, 1, x), predict(model, 3, x))


def test_m6_shaped_model_gives_probabilities():
    rng = np.random.default_rng(7)
    spec = MlpSpec((81, 32, 8, 5), output_transform="softmax", dropout_rate=0.2)
    model = init_phase2(spec, init_params(spec, "xavier_uniform", rng), 1000, 1, rng=rng)
    model.mesa = rng.standard_normal((1000, 1))
    out = predict(model, 17, rng.standard_normal((3, 81)))
    assert out.shape == (3, 5)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
    with pytest.raises(ValueError):
        predict(model, 0, np.zeros((1, 80)))


def test_phase1_matches_ols():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((120, 3))
    y = x @ np.array([1.0, -2.0, 0.5]) + 0.3 + 0.1 * rng.standard_normal(120)
    spec = MlpSpec((3, 1), activation="none")
    beta, _ = train_phase1(TaskBundle([Task(x, y)]), spec, "mse",
                           Phase1Config(lr=0.01, batch_size=200, patience=200, max_epochs=6000), rng)
    X1 = np.column_stack([x, np.ones(120)])
    coef = np.linalg.lstsq(X1, y, rcond=None)[0]
    ols_loss = np.mean((X1 @ coef - y) ** 2)
    fit_loss = np.mean((mlp_forward(spec, beta, x)[:, 0] - y) ** 2)
    assert fit_loss - ols_loss < 1e-6


def test_phase1_duplicated_task_and_determinism():
    spec = MlpSpec((1, 1), activation="none")
    task = linear_tasks([2.0], noise=0.1)[0]
    cfg = Phase1Config(batch_size=500, patience=50, max_epochs=2000)
    once, r1 = train_phase1(TaskBundle([task]), spec, config=cfg, rng=np.random.default_rng(0))
    twice, r2 = train_phase1(TaskBundle([task, task]), spec, config=cfg, rng=np.random.default_rng(0))
    again, _ = train_phase1(TaskBundle([task]), spec, config=cfg, rng=np.random.default_rng(0))
    assert r1.best_loss == pytest.approx(r2.best_loss, rel=1e-6)
    assert np.array_equal(once.flat, again.flat)


def test_phase2_initialisation_reproduces_pooled_model():
    rng = np.random.default_rng(9)
    spec = MlpSpec((2, 6, 3), output_transform="softmax")
    beta = init_params(spec, "xavier_uniform", rng)
    for conn in (Connection.last_layer(spec), Connection.all_layers(spec)):
        model = init_phase2(spec, beta, 4, 2, conn, meta_hidden=(3,), rng=rng)
        assert np.all(model.mesa == 0)
        assert np.all(np.abs(model.omega.views()["W0"]) <= 1)
        x = rng.standard_normal((5, 2))
        for m in range(4):
            np.testing.assert_allclose(predict(model, m, x), mlp_forward(spec, beta, x), atol=1e-12)


def test_phase2_separates_opposite_tasks():
    tasks = linear_tasks([1.0, -1.0], rng=np.random.default_rng(10))
    bundle = TaskBundle(tasks)
    spec = MlpSpec((1, 1), activation="none")
    rng = np.random.default_rng(11)
    beta, _ = train_phase1(bundle, spec, config=Phase1Config(batch_size=100, patience=20), rng=rng)
    model = init_phase2(spec, beta, 2, 1, rng=rng)
    pooled = mtms_loss(model, bundle, "mse")
    trained, res = train_phase2(bundle, model, "mse", Phase2Config(ladder=(0.01, 0.001), batch_tasks=2,
                                                                   patience=20, max_epochs=2000), rng)
    assert res.best_loss <= pooled
    for m in range(2):
        loss_m = mtms_loss(trained, bundle, "mse", task_ids=[m])
        assert loss_m < 0.01 < mtms_loss(model, bundle, "mse", task_ids=[m])


def test_phase2_without_mesa_is_pooled_training():
    tasks = linear_tasks([1.0, -1.0], rng=np.random.default_rng(12))
    bundle = TaskBundle(tasks)
    spec = MlpSpec((1, 1), activation="none")
    rng = np.random.default_rng(13)
    beta = init_params(spec, "zeros")
    model = init_phase2(spec, beta, 2, 0, rng=rng)
    trained, _ = train_phase2(bundle, model, "mse", Phase2Config(ladder=(0.01,), patience=5, max_epochs=50), rng)
    x = np.linspace(-1, 1, 5)[:, None]
    assert np.array_equal(predict(trained, 0, x), predict(trained, 1, x))


def test_adaptation_keeps_omega_frozen_and_matches_training_task():
    tasks = linear_tasks([1.0, -1.0, 0.5], rng=np.random.default_rng(14), noise=0.05)
    bundle = TaskBundle(tasks)
    spec = MlpSpec((1, 1), activation="none")
    rng = np.random.default_rng(15)
    beta, _ = train_phase1(bundle, spec, config=Phase1Config(batch_size=200, patience=20), rng=rng)
    model, _ = train_phase2(bundle, init_phase2(spec, beta, 3, 1, rng=rng), "mse",
                            Phase2Config(ladder=(0.01, 0.001), patience=20, max_epochs=1000), rng)
    omega, orph, mesa = model.omega.flat.copy(), model.orphaned.flat.copy(), model.mesa.copy()
    theta = adapt_new_task(model, tasks[2], config=AdaptConfig(optimizer="adam", lr=0.05), rng=rng)
    assert np.array_equal(model.omega.flat, omega)
    assert np.array_equal(model.orphaned.flat, orph)
    assert np.array_equal(model.mesa, mesa)
    probe = model.copy()
    probe.mesa = theta[None, :]
    adapted = mtms_loss(probe, TaskBundle([tasks[2]]), "mse")
    at_training_theta = mtms_loss(model, bundle, "mse", task_ids=[2])
    assert adapted <= at_training_theta + 1e-3


def test_adaptation_uses_only_training_rows():
    model, _ = small_model(np.random.default_rng(16), base=(1, 3, 1))
    rng = np.random.default_rng(17)
    x = rng.uniform(-1, 1, (20, 1))
    base = Task(x, x[:, 0], 5)
    poisoned = Task(x, np.r_[x[:5, 0], np.full(15, 1e6)], 5)
    a = adapt_tasks(model, [base], config=AdaptConfig(steps=50), rng=np.random.default_rng(0))
    b = adapt_tasks(model, [poisoned], config=AdaptConfig(steps=50), rng=np.random.default_rng(0))
    assert np.array_equal(a, b)


def test_adaptation_needs_training_rows():
    model, _ = small_model(np.random.default_rng(18), base=(1, 3, 1))
    with pytest.raises(ValueError):
        adapt_new_task(model, Task(np.zeros((3, 1)), np.zeros(3), 0))
    with pytest.raises(ValueError):
        adapt_new_task(small_model(np.random.default_rng(1), d_theta=0)[0],
                       Task(np.zeros((3, 3)), np.zeros((3, 2))))


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(19)
    model, _ = small_model(rng, softmax=True, meta_hidden=(2,))
    model.norm_stats = {"mean": [0.1, 0.2], "std": [1.0, 2.0]}
    path = tmp_path / "model.json"
    save_checkpoint(model, path)
    back = load_checkpoint(path)
    x = rng.standard_normal((6, 3))
    for m in range(model.n_tasks):
        assert np.array_equal(predict(model, m, x), predict(back, m, x))
    assert back.norm_stats == model.norm_stats


def test_checkpoint_errors(tmp_path):
    model, _ = small_model(np.random.default_rng(20))
    path = tmp_path / "model.json"
    save_checkpoint(model, path)
    text = path.read_text()
    (tmp_path / "cut.json").write_text(text[: len(text) // 2])
    with pytest.raises(CheckpointError, match="malformed"):
        load_checkpoint(tmp_path / "cut.json")
    doc = json.loads(text)
    del doc["norm_stats"]
    (tmp_path / "nostats.json").write_text(json.dumps(doc))
    with pytest.raises(CheckpointError, match="norm_stats"):
        load_checkpoint(tmp_path / "nostats.json")
    doc = json.loads(text)
    doc["version"] = 99
    (tmp_path / "v.json").write_text(json.dumps(doc))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v.json")


def test_linear_special_case_matches_als():
    rng = np.random.default_rng(21)
    d_x, n = 2, 30
    series = []
    for phi in (0.9, 0.2, -0.4, 0.6):
        y = [rng.standard_normal()]
        for _ in range(n - 1):
            y.append(0.5 + phi * y[-1] + 0.2 * rng.standard_normal())
        series.append(np.array(y))
    data = SeriesSet(series, d_x)
    als = als_fit(data, 1)
    als_obj = sse(data, als.betas())
    rows = len(data.design(0)[1])
    tasks = [Task(X[:, 1:], y) for X, y in (data.design(m) for m in range(len(data)))]
    bundle = TaskBundle(tasks)
    spec = MlpSpec((d_x, 1), activation="none")
    beta, _ = train_phase1(bundle, spec, config=Phase1Config(batch_size=500, patience=50, max_epochs=3000),
                           rng=rng)
    model = init_phase2(spec, beta, len(tasks), 1, Connection.all_layers(spec), rng=rng, bound=0.1)
    model, _ = train_phase2(bundle, model, "mse",
                            Phase2Config(ladder=(0.01, 0.001, 0.0001), batch_tasks=4, patience=100,
                                         max_epochs=8000), rng)
    joint = mtms_loss(model, bundle, "mse") * rows * len(tasks)
    assert abs(joint - als_obj) <= 1e-4 * als_obj
