import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from dpjl.autodiff import Dense, Model, per_sample_grads
from dpjl.jl import clip_rows, clip_weights, estimate_norms, exact_norms, row_norms
from dpjl.rng import derive_stream

from conftest import init, mlp


@pytest.fixture(scope="module")
def batch():
    model = mlp(in_features=4, hidden=5, classes=3)
    params = init(model, 11)
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 4))
    y = rng.integers(0, 3, size=4)
    return model, params, x, y


def estimates(batch, r, seeds):
    model, params, x, y = batch
    return np.array([estimate_norms(model, params, x, y, r, derive_stream(s, "jl-proj/test")).values
                     for s in seeds])


def test_zero_gradients_give_zero_estimates():
    model = Model([Dense(3, 2)], "mse", (3,))
    x = np.random.default_rng(0).normal(size=(4, 3))
    est = estimate_norms(model, model.zeros(), x, np.zeros((4, 2)), 7, derive_stream(0, "jl"))
    assert np.all(est.values == 0)
    assert np.all(exact_norms(model, model.zeros(), x, np.zeros((4, 2))) == 0)


def test_squared_estimate_is_unbiased(batch):
    model, params, x, y = batch
    exact = exact_norms(model, params, x, y)
    m2 = (estimates(batch, 50, range(2000)) ** 2).mean(axis=0)
    np.testing.assert_allclose(m2, exact**2, rtol=0.05)


def test_ratio_follows_scaled_chi_law(batch):
    model, params, x, y = batch
    ratio = (estimates(batch, 10, range(10_000)) / exact_norms(model, params, x, y))[:, 0]
    ks = stats.kstest(ratio, lambda t: stats.chi2.cdf(10 * t**2, 10)).statistic
    assert ks < 0.02


def test_variance_shrinks_with_jl_dimension(batch):
    model, params, x, y = batch
    exact = exact_norms(model, params, x, y)
    var = [np.var(estimates(batch, r, range(1000)) / exact) for r in (1, 5, 10, 30, 100)]
    assert all(a > b for a, b in zip(var, var[1:]))


def test_scale_equivariance(batch):
    model, params, x, y = batch
    scaled = Model(model.layers, model.loss, model.input_shape, loss_scale=3.0)
    a = estimate_norms(model, params, x, y, 5, derive_stream(9, "jl")).values
    b = estimate_norms(scaled, params, x, y, 5, derive_stream(9, "jl")).values
    np.testing.assert_allclose(b, 3.0 * a, rtol=1e-14)


def test_reproducible_and_counts_passes(batch):
    model, params, x, y = batch
    model.counters.reset()
    a = estimate_norms(model, params, x, y, 6, derive_stream(1, "jl"))
    assert (model.counters.tangent, model.counters.reverse) == (6, 0)
    b = estimate_norms(model, params, x, y, 6, derive_stream(1, "jl"))
    assert np.array_equal(a.values, b.values)
    assert a.jl_dim == 6 and a.projection_seed == (1, "jl")


def test_rejects_bad_dimension(batch):
    model, params, x, y = batch
    with pytest.raises(ValueError):
        estimate_norms(model, params, x, y, 0, derive_stream(0, "jl"))


def test_exact_norms_duplicates(batch):
    model, params, x, y = batch
    n = exact_norms(model, params, np.stack([x[0], x[0]]), np.array([y[0], y[0]]))
    assert n[0] == n[1]


def test_exact_norm_linear_regression():
    model = Model([Dense(3, 1)], "mse", (3,))
    params = init(model, 2)
    (W, b), = params.unflatten()
    x = np.array([[0.3, -1.2, 2.0]])
    y = np.array([[0.7]])
    resid = float(x[0] @ W[:, 0] + b[0] - 0.7)
    expected = 2 * abs(resid) * np.sqrt(x[0] @ x[0] + 1)  # loss (w.x + b - y)^2
    assert exact_norms(model, params, x, y)[0] == pytest.approx(expected, rel=1e-10)


def test_clip_weights_examples():
    np.testing.assert_array_equal(clip_weights([0.1, 0.5, 1.0], 1.0, 3), np.full(3, 1 / 3))
    assert clip_weights([2.0], 1.0, 1)[0] == 0.5
    assert clip_weights([0.0], 1.0, 4)[0] == 0.25
    assert clip_weights([1e-13], 1e-20, 2)[0] == 0.5
    for bad in (0.0, -1.0):
        with pytest.raises(ValueError):
            clip_weights([1.0], bad, 1)
    with pytest.raises(ValueError):
        clip_weights([-1.0], 1.0, 1)


@given(st.lists(st.floats(1e-6, 1e3), min_size=1, max_size=8), st.lists(st.floats(1e-6, 1e3), min_size=8,
       max_size=8), st.floats(1e-3, 1e2), st.integers(1, 64))
def test_weighted_norm_identity(g_norms, estimates_, clip, B):
    g = np.array(g_norms)
    m = np.array(estimates_[:g.size])
    w = clip_weights(m, clip, B)
    np.testing.assert_allclose(w * g, np.minimum(g, clip * g / m) / B, rtol=1e-14)


def test_clip_rows_bounds_norms(batch):
    model, params, x, y = batch
    G = per_sample_grads(model, params, x, y)
    clip = 0.5 * np.median(row_norms(G))
    clipped = row_norms(clip_rows(G, clip))
    assert np.all(clipped <= clip * (1 + 1e-12))
    small = row_norms(G) <= clip
    np.testing.assert_array_equal(clip_rows(G, clip)[small], G[small])
