import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mtms.autodiff import NumericError, ShapeError, Tape, UsageError, dropout, gradient_check


def unary_tape(op):
    t = Tape()
    x = t.input("x")
    getattr(t, op)(x)
    return t


def test_square_forward_and_backward():
    t = Tape()
    x = t.input("x")
    t.mul(x, x)
    assert t.forward({"x": 3.0})[0, 0] == 9.0
    assert t.backward()["x"][0, 0] == 6.0


def test_leaky_relu_negative_input():
    t = Tape()
    t.leaky_relu(t.input("x"), 0.01)
    assert t.forward({"x": -1.0})[0, 0] == pytest.approx(-0.01, abs=1e-15)


def test_softmax_of_zero_logits_is_uniform():
    t = unary_tape("softmax_rows")
    np.testing.assert_allclose(t.forward({"x": np.zeros((1, 5))}), np.full((1, 5), 0.2), atol=1e-15)


def test_softmax_cross_entropy_gradient():
    t = Tape()
    z = t.input("z")
    onehot = t.input("onehot")
    logp = t.log(t.softmax_rows(z))
    t.scale(t.sum(t.mul(onehot, logp)), -1.0)
    target = np.zeros((1, 5))
    target[0, 2] = 1.0
    t.forward({"z": np.zeros((1, 5)), "onehot": target})
    grad = t.backward()["z"]
    np.testing.assert_allclose(grad, [[0.2, 0.2, -0.8, 0.2, 0.2]], atol=1e-12)


def test_zero_seed_gives_zero_gradients():
    rng = np.random.default_rng(3)
    t = Tape()
    x, w = t.input("x"), t.input("w")
    t.tanh(t.matmul(x, w))
    t.forward({"x": rng.standard_normal((4, 3)), "w": rng.standard_normal((3, 2))})
    grads = t.backward(np.zeros((4, 2)))
    assert all(np.all(g == 0) for g in grads.values())


def test_backward_before_forward_is_usage_error():
    t = unary_tape("tanh")
    with pytest.raises(UsageError):
        t.backward()


def test_backward_twice_is_usage_error():
    t = unary_tape("tanh")
    t.forward({"x": 0.5})
    t.backward()
    with pytest.raises(UsageError):
        t.backward()


def test_missing_binding():
    t = Tape()
    t.add(t.input("a"), t.input("b"))
    with pytest.raises(UsageError, match="b"):
        t.forward({"a": 1.0})


def test_shape_mismatch_names_node():
    t = Tape()
    t.matmul(t.input("a"), t.input("b"))
    with pytest.raises(ShapeError, match="matmul"):
        t.forward({"a": np.ones((2, 3)), "b": np.ones((2, 3))})


def test_add_does_not_broadcast():
    t = Tape()
    t.add(t.input("a"), t.input("b"))
    with pytest.raises(ShapeError):
        t.forward({"a": np.ones((2, 3)), "b": np.ones((1, 3))})


def test_non_finite_intermediate():
    t = unary_tape("log")
    with pytest.raises(NumericError):
        t.forward({"x": -1.0})


def test_dropout_eval_and_zero_rate_are_identity():
    x = np.random.default_rng(0).standard_normal((3, 4))
    np.testing.assert_array_equal(dropout(x, 0.5, train=False), x)
    np.testing.assert_array_equal(dropout(x, 0.0, train=True, rng=np.random.default_rng(1)), x)


def test_dropout_replays_seeded_mask():
    x = np.ones((1, 4))
    out = dropout(x, 0.5, train=True, rng=np.random.default_rng(42))
    keep = np.random.default_rng(42).random((1, 4)) >= 0.5
    np.testing.assert_array_equal(out, np.where(keep, 2.0, 0.0))
    assert set(np.unique(out)) <= {0.0, 2.0}


def test_dropout_rate_one_rejected():
    with pytest.raises(ValueError):
        dropout(np.ones((1, 2)), 1.0, train=True, rng=np.random.default_rng(0))
    with pytest.raises(ValueError):
        Tape().dropout(Tape().input("x"), 1.0)


def test_tape_dropout_matches_standalone():
    t = Tape()
    t.dropout(t.input("x"), 0.3)
    x = np.arange(12.0).reshape(3, 4)
    a = t.forward({"x": x}, train=True, rng=np.random.default_rng(5))
    b = dropout(x, 0.3, train=True, rng=np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(t.forward({"x": x}), x)


UNARY = ["tanh", "exp", "square", "sin", "sum", "mean", "sum_cols", "softmax_rows", "abs", "relu"]


@pytest.mark.parametrize("op", UNARY)
def test_unary_primitive_gradients(op):
    rng = np.random.default_rng(hash(op) % 2**32)
    x = rng.standard_normal((3, 4))
    if op in ("abs", "relu"):
        x = np.where(np.abs(x) < 0.1, 0.5, x)
    assert gradient_check(unary_tape(op), {"x": x}) < 1e-6


def test_log_gradient():
    x = np.random.default_rng(0).uniform(0.5, 2.0, (3, 2))
    assert gradient_check(unary_tape("log"), {"x": x}) < 1e-6


def test_leaky_relu_gradient():
    t = Tape()
    t.leaky_relu(t.input("x"), 0.01)
    x = np.array([[-2.0, -0.3, 0.4, 1.5]])
    assert gradient_check(t, {"x": x}) < 1e-6


@pytest.mark.parametrize("op", ["add", "sub", "mul"])
def test_binary_primitive_gradients(op):
    rng = np.random.default_rng(1)
    t = Tape()
    getattr(t, op)(t.input("a"), t.input("b"))
    assert gradient_check(t, {"a": rng.standard_normal((2, 3)), "b": rng.standard_normal((2, 3))}) < 1e-6


def test_matmul_bias_scale_gradients():
    rng = np.random.default_rng(2)
    t = Tape()
    h = t.add_bias(t.matmul(t.input("x"), t.input("w")), t.input("b"))
    t.scale(h, 2.5)
    b = {"x": rng.standard_normal((5, 3)), "w": rng.standard_normal((3, 2)), "b": rng.standard_normal((1, 2))}
    assert gradient_check(t, b) < 1e-6


def test_gather_slice_segment_gradients():
    rng = np.random.default_rng(4)
    t = Tape()
    table = t.input("table")
    idx = t.input("idx", index=True)
    seg = t.input("seg", index=True)
    rows = t.gather_rows(table, idx)
    w = t.slice_cols(rows, 1, 7)
    t.segment_matmul(t.input("h"), w, seg, 3, 2)
    b = {"table": rng.standard_normal((4, 8)), "idx": np.array([2, 0, 2]),
         "seg": np.array([0, 1, 0, 2, 2]), "h": rng.standard_normal((5, 3))}
    assert gradient_check(t, b) < 1e-6


def test_segment_matmul_matches_loop():
    rng = np.random.default_rng(5)
    t = Tape()
    t.segment_matmul(t.input("h"), t.input("w"), t.input("seg", index=True), 3, 2)
    h, w, seg = rng.standard_normal((6, 3)), rng.standard_normal((2, 6)), np.array([1, 0, 1, 1, 0, 1])
    out = t.forward({"h": h, "w": w, "seg": seg})
    expected = np.stack([h[i] @ w[seg[i]].reshape(3, 2) for i in range(6)])
    np.testing.assert_allclose(out, expected, atol=1e-14)


def random_network(rng):
    """Tape for a 3-layer network with a random activation mix and an MSE head."""
    sizes = [int(rng.integers(1, 5)) for _ in range(4)]
    acts = rng.choice(["tanh", "leaky_relu", "sin"], size=2)
    t = Tape()
    h = t.input("x")
    bindings = {"x": rng.standard_normal((int(rng.integers(1, 6)), sizes[0]))}
    for l in range(3):
        w, b = t.input(f"W{l}"), t.input(f"b{l}")
        bindings[f"W{l}"] = rng.standard_normal((sizes[l], sizes[l + 1]))
        bindings[f"b{l}"] = rng.standard_normal((1, sizes[l + 1]))
        h = t.add_bias(t.matmul(h, w), b)
        if l < 2:
            h = t.leaky_relu(h, 0.01) if acts[l] == "leaky_relu" else getattr(t, acts[l])(h)
    y = t.input("y")
    bindings["y"] = rng.standard_normal((bindings["x"].shape[0], sizes[3]))
    t.mean(t.square(t.sub(h, y)))
    return t, bindings


def test_gradient_check_random_networks():
    worst = max(gradient_check(*random_network(np.random.default_rng(s))) for s in range(100))
    assert worst <= 1e-4


def test_backward_is_linear_in_the_loss():
    rng = np.random.default_rng(7)
    t1, b = random_network(rng)
    t1.forward(b)
    g1 = t1.backward(np.array([[1.0]]))
    t1.forward(b)
    g3 = t1.backward(np.array([[3.0]]))
    for k in g1:
        np.testing.assert_allclose(g3[k], 3 * g1[k], rtol=1e-12, atol=1e-15)


def test_backward_of_sum_equals_sum_of_backwards():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((4, 3))
    t = Tape()
    xi = t.input("x")
    la = t.sum(t.tanh(xi))
    lb = t.mean(t.square(xi))
    t.add(la, lb)
    t.forward({"x": x})
    total = t.backward()["x"]
    parts = []
    for node in (la, lb):
        t.forward({"x": x}, output=node)
        parts.append(t.backward()["x"])
    np.testing.assert_allclose(total, parts[0] + parts[1], rtol=1e-12)


def test_determinism_bit_identical():
    outs = []
    for _ in range(2):
        t, b = random_network(np.random.default_rng(11))
        val = t.forward(b)
        outs.append((val, t.backward()))
    assert np.array_equal(outs[0][0], outs[1][0])
    for k in outs[0][1]:
        assert np.array_equal(outs[0][1][k], outs[1][1][k])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.integers(1, 4))
def test_softmax_rows_on_simplex(values, rows):
    logits = np.tile(np.array(values), (rows, 1))
    p = unary_tape("softmax_rows").forward({"x": logits})
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    if len(values) > 1 and max(values) - min(values) < 30:
        assert np.all((p > 0) & (p < 1))
