import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mtms.autodiff import Tape, gradient_check
from mtms.losses import DegenerateSeriesError, cum_matrix, mase, mase_scale, mse, one_hot, rps, rps_node

UNIFORM = np.full(5, 0.2)


def test_mse_examples():
    assert mse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert mse([0, 0], [1, 1]) == 1.0
    assert mse([1, 3], [2, 5]) == 2.5
    with pytest.raises(ValueError):
        mse([1, 2], [1, 2, 3])


def test_rps_perfect_forecast():
    for q in range(1, 6):
        assert rps(one_hot([q])[0], one_hot([q])[0]) == 0.0


def test_rps_uniform_per_outcome():
    values = [rps(UNIFORM, one_hot([q])[0]) for q in range(1, 6)]
    np.testing.assert_allclose(values, [0.24, 0.12, 0.08, 0.12, 0.24], atol=1e-12)
    assert abs(np.mean(values) - 0.16) <= 1e-12


def test_rps_batch_and_bounds():
    probs = np.random.default_rng(0).dirichlet(np.ones(5), size=50)
    out = rps(probs, one_hot(np.arange(50) % 5 + 1))
    assert out.shape == (50,)
    assert np.all((out >= 0) & (out <= 0.8))
    # worst case: all mass on quintile 1, outcome quintile 5
    assert rps(one_hot([1])[0], one_hot([5])[0]) == pytest.approx(0.8)


def test_rps_rejects_invalid_inputs():
    with pytest.raises(ValueError):
        rps([0.5, 0.5, 0.5, 0, 0], one_hot([1])[0])
    with pytest.raises(ValueError):
        rps(UNIFORM, [0.5, 0.5, 0, 0, 0])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.01, 10), min_size=5, max_size=5), st.integers(1, 5))
def test_rps_reversal_symmetry(weights, q):
    p = np.array(weights) / np.sum(weights)
    o = one_hot([q])[0]
    assert rps(p, o) == pytest.approx(rps(p[::-1], o[::-1]), abs=1e-12)


def test_rps_node_matches_function_and_gradient():
    rng = np.random.default_rng(1)
    probs = rng.dirichlet(np.ones(5), size=4)
    labels = one_hot([1, 3, 5, 2])
    t = Tape()
    rps_node(t, t.input("p"), t.input("o"), t.input("cum"))
    val = t.forward({"p": probs, "o": labels, "cum": cum_matrix()})[0, 0]
    assert val == pytest.approx(rps(probs, labels).mean(), abs=1e-14)
    assert gradient_check(t, {"p": probs, "o": labels, "cum": cum_matrix()}) < 1e-6


def test_mase_examples():
    scale = mase_scale([2, 4, 6, 8], 1)
    assert scale == 2.0
    assert mase([1, 3], [0, 0], scale) == 1.0
    assert mase([5, 6], [5, 6], scale) == 0.0


def test_seasonal_naive_scores_one_in_sample():
    y = np.random.default_rng(2).standard_normal(40).cumsum()
    for period in (1, 4, 12):
        assert mase(y[:-period], y[period:], mase_scale(y, period)) == pytest.approx(1.0)


def test_mase_degenerate_scale():
    with pytest.raises(DegenerateSeriesError):
        mase_scale([3.0, 3.0, 3.0])
    with pytest.raises(DegenerateSeriesError):
        mase([1.0], [1.0], 0.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=2, max_size=20))
def test_mse_mase_non_negative_zero_iff_equal(values):
    a = np.array(values)
    b = a + 1.0
    assert mse(a, a) == 0.0 and mse(a, b) > 0
    assert mase(a, a, 1.5) == 0.0 and mase(a, b, 1.5) > 0
