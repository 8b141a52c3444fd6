"""Tests for the L-BFGS and Adam optimizers."""

import numpy as np
import pytest

from dyntex import optim


def rosenbrock(x):
    f = 100.0 * (x[1] - x[0] ** 2) ** 2 + (1.0 - x[0]) ** 2
    g = np.array([
        -400.0 * x[0] * (x[1] - x[0] ** 2) - 2.0 * (1.0 - x[0]),
        200.0 * (x[1] - x[0] ** 2),
    ])
    return f, g


class TestLbfgs:
    def test_exact_on_separable_quadratic(self):
        c = np.array([3.0, -1.0, 0.5])

        def fun(x):
            return float(np.sum((x - c) ** 2)), 2.0 * (x - c)

        res = optim.lbfgs_minimize(fun, np.zeros(3), max_iters=10)
        np.testing.assert_allclose(res.x, c, atol=1e-10)
        assert res.status == "converged"

    def test_spd_quadratic_small(self):
        rng = np.random.default_rng(0)
        dim = 8
        m = rng.standard_normal((dim, dim))
        a = m.T @ m / dim + np.eye(dim)
        c = rng.standard_normal(dim)

        def fun(x):
            r = a @ (x - c)
            return 0.5 * float((x - c) @ r), r

        opts = optim.LbfgsOptions(grad_tol=0.0, loss_rel_tol=0.0)
        res = optim.lbfgs_minimize(fun, np.zeros(dim), max_iters=dim, options=opts)
        assert np.max(np.abs(res.x - c)) < 1e-8

    def test_rosenbrock_reaches_optimum(self):
        res = optim.lbfgs_minimize(rosenbrock, np.array([-1.2, 1.0]), max_iters=200)
        assert np.max(np.abs(res.x - 1.0)) < 1e-5

    def test_rosenbrock_matches_scipy_reference(self):
        scipy_opt = pytest.importorskip("scipy.optimize")
        res = optim.lbfgs_minimize(rosenbrock, np.array([-1.2, 1.0]), max_iters=200)
        ref = scipy_opt.minimize(
            lambda x: rosenbrock(x)[0], np.array([-1.2, 1.0]),
            jac=lambda x: rosenbrock(x)[1], method="L-BFGS-B")
        assert res.fx <= ref.fun + 1e-10

    def test_trace_is_monotone(self):
        res = optim.lbfgs_minimize(rosenbrock, np.array([-1.2, 1.0]), max_iters=50)
        losses = res.trace
        assert all(b <= a for a, b in zip(losses, losses[1:]))

    def test_zero_gradient_is_immediate_convergence(self):
        def fun(x):
            return 1.0, np.zeros_like(x)

        res = optim.lbfgs_minimize(fun, np.ones(4), max_iters=10)
        assert res.status == "converged"
        np.testing.assert_array_equal(res.x, np.ones(4))

    def test_deterministic(self):
        a = optim.lbfgs_minimize(rosenbrock, np.array([-1.2, 1.0]), max_iters=60)
        b = optim.lbfgs_minimize(rosenbrock, np.array([-1.2, 1.0]), max_iters=60)
        assert np.array_equal(a.x, b.x)
        assert a.trace == b.trace

    def test_nan_loss_raises_with_best_point(self):
        def fun(x):
            if x[0] > 0.5:
                return np.nan, np.zeros_like(x)
            return float(np.sum(x ** 2)), 2.0 * x

        # start in the NaN region: the very first evaluation blows up
        with pytest.raises(optim.NanLossError):
            optim.lbfgs_minimize(fun, np.array([1.0, 0.0]), max_iters=5)

    def test_history_capped_at_m(self):
        rng = np.random.default_rng(1)
        dim = 30
        m = rng.standard_normal((dim, dim))
        a = m.T @ m / dim + np.eye(dim)
        c = rng.standard_normal(dim)

        def fun(x):
            r = a @ (x - c)
            return 0.5 * float((x - c) @ r), r

        opts = optim.LbfgsOptions(m=3, grad_tol=0.0, loss_rel_tol=0.0)
        res = optim.lbfgs_minimize(fun, np.zeros(dim), max_iters=100, options=opts)
        # limited memory still converges, just not in n steps
        assert np.max(np.abs(res.x - c)) < 1e-6


class TestAdam:
    def test_first_step_is_signed_lr(self):
        # with bias correction the first update is lr * sign(grad)
        # (up to eps), independent of gradient magnitude
        state = optim.AdamState(lr=0.1)
        params = np.zeros(3)
        grad = np.array([5.0, -0.01, 0.0])
        new = optim.adam_step(grad, state, params)
        np.testing.assert_allclose(new[:2], [-0.1, 0.1], rtol=1e-5)
        assert new[2] == 0.0

    def test_converges_on_quadratic(self):
        c = np.array([1.0, -2.0])
        state = optim.AdamState(lr=0.05)
        x = np.zeros(2)
        for _ in range(2000):
            x = optim.adam_step(2.0 * (x - c), state, x)
        np.testing.assert_allclose(x, c, atol=1e-3)

    def test_matches_reference_formula(self):
        rng = np.random.default_rng(2)
        state = optim.AdamState(lr=1e-2)
        x = rng.standard_normal(4)
        m = np.zeros(4)
        v = np.zeros(4)
        x_ref = x.copy()
        for t in range(1, 6):
            g = 2.0 * x_ref  # gradient of |x|^2 at the reference point
            x = optim.adam_step(2.0 * x_ref, state, x)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mh = m / (1 - 0.9 ** t)
            vh = v / (1 - 0.999 ** t)
            x_ref = x_ref - 1e-2 * mh / (np.sqrt(vh) + 1e-8)
            np.testing.assert_allclose(x, x_ref, rtol=1e-10)
