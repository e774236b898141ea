import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from neural_gaits import autodiff as ad


def fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def check(f, x, rtol=1e-4):
    val, g = ad.grad(f, x)
    g_fd = fd_grad(lambda v: float(ad.value(f(v))), x)
    assert np.isclose(val, float(ad.value(f(x))))
    err = np.linalg.norm(g - g_fd) / max(np.linalg.norm(g_fd), 1e-8)
    assert err < rtol, err


CASES = {
    "poly": lambda x: ad.sum(x * x * x - 2.0 * x),
    "trig": lambda x: ad.sum(ad.sin(x) * ad.cos(2.0 * x)),
    "tanh_exp": lambda x: ad.sum(ad.tanh(x) + ad.exp(0.3 * x)),
    "div_sqrt": lambda x: ad.sum(ad.sqrt(x * x + 1.0) / (2.0 + x * x)),
    "power": lambda x: ad.sum(ad.power(x * x + 1.0, 1.5)),
    "broadcast": lambda x: ad.sum(x[:, None] * np.arange(3.0)[None, :] + x[:1]),
    "matmul": lambda x: ad.sum(ad.matmul(ad.reshape(x, (2, 2)), ad.reshape(x, (2, 2))) ** 2),
    "stack_getitem": lambda x: ad.sum(ad.stack([x[0] * x[1], x[2], x[3] ** 2], axis=-1) ** 2),
    "concat_mean": lambda x: ad.mean(ad.concatenate([x, 2.0 * x], axis=-1) ** 2),
    "solve": lambda x: ad.sum(ad.solve(ad.reshape(x, (2, 2)) + 3.0 * np.eye(2), np.ones(2))),
    "swap": lambda x: ad.sum(ad.swapaxes(ad.reshape(x, (2, 2)), -1, -2) * np.array([[1.0, 2.0], [3.0, 4.0]])),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradient_matches_finite_differences(name):
    x = np.array([0.3, -0.7, 1.1, 0.4])
    check(CASES[name], x)


@settings(max_examples=30, deadline=None)
@given(arrays(float, 4, elements=st.floats(-2, 2)))
def test_random_points_composite(x):
    check(lambda v: ad.sum(ad.tanh(v) * ad.sin(v) + 0.5 * v * v), x)


def test_piecewise_ops_away_from_kinks():
    x = np.array([0.5, -0.4, 1.2, -1.5])
    check(lambda v: ad.sum(ad.relu(v) + ad.minimum(v, 0.1 * v) + ad.maximum(v * v, 0.2)), x)
    check(lambda v: ad.sum(ad.where(ad.value(v) > 0, v * v, -v)), x)


def test_plain_arrays_bypass_tape():
    out = ad.sum(ad.sin(np.ones(3)))
    assert not isinstance(out, ad.Var)
    assert np.isclose(out, 3 * np.sin(1.0))


def test_gradient_accumulates_over_reuse():
    val, g = ad.grad(lambda v: ad.sum(v * v + v * v), np.array([1.0, 2.0]))
    assert np.allclose(g, [4.0, 8.0])


def test_constant_function_has_zero_gradient():
    val, g = ad.grad(lambda v: 3.0, np.ones(2))
    assert val == 3.0 and np.all(g == 0)
