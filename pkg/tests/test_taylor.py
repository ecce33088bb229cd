import numpy as np
import pytest

from shipmpc.taylor import Taylor2, sym_hessian, tcos, tsin


def fd_grad_hess(fun, x0, h=1e-5):
    n = x0.size
    grad = np.zeros(n)
    hess = np.zeros((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        grad[i] = (fun(x0 + e) - fun(x0 - e)) / (2 * h)
    for i in range(n):
        for j in range(n):
            ei, ej = np.zeros(n), np.zeros(n)
            ei[i], ej[j] = h, h
            hess[i, j] = (
                fun(x0 + ei + ej) - fun(x0 + ei - ej) - fun(x0 - ei + ej)
                + fun(x0 - ei - ej)
            ) / (4 * h * h)
    return grad, hess


def test_polynomial_exact():
    x0 = np.array([1.3, -0.7])

    def build(x):
        return x[0] ** 3 + 2.0 * x[0] * x[1] - x[1] ** 2 + 5.0

    a, b = Taylor2.seed(x0)
    expr = a**3 + 2.0 * a * b - b**2 + 5.0
    assert expr.v == pytest.approx(build(x0))
    assert np.allclose(expr.g, [3 * x0[0] ** 2 + 2 * x0[1], 2 * x0[0] - 2 * x0[1]])
    assert np.allclose(sym_hessian(expr), [[6 * x0[0], 2.0], [2.0, -2.0]])


def test_trig_and_division_vs_finite_differences():
    x0 = np.array([0.4, -1.2, 2.2])

    def value(x):
        return np.sin(x[0]) * np.cos(x[1]) / (1.0 + x[2] ** 2) + x[0] / x[2]

    a, b, c = Taylor2.seed(x0)
    expr = tsin(a) * tcos(b) / (1.0 + c**2) + a / c
    g_fd, h_fd = fd_grad_hess(value, x0)
    assert expr.v == pytest.approx(value(x0), rel=1e-12)
    assert np.allclose(expr.g, g_fd, rtol=1e-6, atol=1e-8)
    assert np.allclose(sym_hessian(expr), h_fd, rtol=1e-4, atol=1e-6)


def test_reciprocal_and_rsub():
    (a,) = Taylor2.seed(np.array([2.0]))
    expr = 3.0 - 1.0 / a
    assert expr.v == pytest.approx(2.5)
    assert expr.g[0] == pytest.approx(0.25)
    assert expr.h[0, 0] == pytest.approx(-0.25)


def test_batch_matches_scalar_loop(rng):
    values = rng.uniform(-1.0, 1.0, (6, 3))
    a, b, c = Taylor2.seed_batch(values)
    expr = tsin(a) * b + (c**2) / (2.0 + tcos(a))
    for i in range(6):
        ai, bi, ci = Taylor2.seed(values[i])
        ref = tsin(ai) * bi + (ci**2) / (2.0 + tcos(ai))
        assert expr.v[i] == pytest.approx(ref.v, rel=1e-14)
        assert np.allclose(expr.g[i], ref.g, atol=1e-14)
        assert np.allclose(expr.h[i], ref.h, atol=1e-14)


def test_constant_and_power_rules():
    (a,) = Taylor2.seed(np.array([1.5]))
    one = a**0
    assert one.v == pytest.approx(1.0)
    assert np.all(one.g == 0.0)
    with pytest.raises(ValueError):
        a ** (-1)
    with pytest.raises(ValueError):
        a**0.5
