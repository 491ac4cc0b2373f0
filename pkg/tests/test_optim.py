"""AdamW, L-BFGS, and the LR schedule."""

import numpy as np
import pytest

from duomotion.optim import (LbfgsResult, ParameterStore, adamw_step,
                             cosine_restart_lr, grad, lbfgs_minimize)
from duomotion.tensor import NonFiniteError, Tensor


def test_adamw_zero_grad_no_decay_leaves_parameter():
    store = ParameterStore()
    p = store.add("p", [1.5])
    adamw_step(store, {"p": np.zeros(1)}, lr=0.1, weight_decay=0.0)
    assert np.allclose(p.data, [1.5])


def test_adamw_minimizes_quadratic_bowl():
    store = ParameterStore()
    p = store.add("x", [3.0])
    for _ in range(200):
        loss = (p * p).sum()
        g = grad(loss, store)
        adamw_step(store, g, lr=0.1)
    assert abs(p.data[0]) < 1e-3


def test_adamw_decoupled_decay_shrinks_parameter():
    store = ParameterStore()
    p = store.add("p", [2.0])
    lr, wd = 0.05, 0.1
    expected = 2.0
    for _ in range(3):
        adamw_step(store, {"p": np.zeros(1)}, lr=lr, weight_decay=wd)
        expected *= (1.0 - lr * wd)
    assert np.allclose(p.data, [expected])


def test_adamw_shape_mismatch_raises():
    store = ParameterStore()
    store.add("p", [1.0, 2.0])
    with pytest.raises(ValueError):
        adamw_step(store, {"p": np.zeros(3)}, lr=0.1)


def _quad(b):
    def f(x):
        d = x - b
        return float(d.dot(d)), 2.0 * d
    return f


def test_lbfgs_simple_quadratic_exact():
    b = np.array([1.0, -2.0, 0.5])
    res = lbfgs_minimize(_quad(b), np.zeros(3), max_iters=50, history_size=10,
                         tolerance=1e-10)
    assert res.converged
    assert np.allclose(res.x, b, atol=1e-8)


def test_lbfgs_rosenbrock():
    def f(x):
        a, b = x
        val = (1 - a) ** 2 + 100 * (b - a * a) ** 2
        g = np.array([-2 * (1 - a) - 400 * a * (b - a * a), 200 * (b - a * a)])
        return float(val), g

    res = lbfgs_minimize(f, np.array([-1.2, 1.0]), max_iters=500, history_size=10,
                         tolerance=1e-10)
    assert np.allclose(res.x, [1.0, 1.0], atol=1e-6)


def test_lbfgs_matches_direct_solve_on_random_spd():
    rng = np.random.default_rng(11)
    n = 10
    A = rng.normal(size=(n, n))
    A = A @ A.T + n * np.eye(n)
    b = rng.normal(size=n)
    x_star = np.linalg.solve(A, b)     # direct linear-solve oracle

    def f(x):
        return float(0.5 * x @ A @ x - b @ x), A @ x - b

    res = lbfgs_minimize(f, np.zeros(n), max_iters=200, history_size=20,
                         tolerance=1e-12)
    assert np.allclose(res.x, x_star, atol=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_lbfgs_convex_quadratic_iteration_bound(seed):
    # Gradient norm 1e-8 within 2n iterations on moderately conditioned quadratics.
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 21))
    Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    eig = rng.uniform(0.1, 10.0, size=n)
    A = Q @ np.diag(eig) @ Q.T
    b = rng.normal(size=n)

    def f(x):
        return float(0.5 * x @ A @ x - b @ x), A @ x - b

    res = lbfgs_minimize(f, np.zeros(n), max_iters=2 * n, history_size=n,
                         tolerance=1e-8)
    assert res.converged, f"n={n}, iters={res.iterations}"


def test_lbfgs_nonfinite_start_raises():
    def f(x):
        return float("nan"), x

    with pytest.raises(NonFiniteError):
        lbfgs_minimize(f, np.ones(2))


def test_lbfgs_line_search_failure_returns_best_with_flag():
    # The gradient lies about the descent direction: f increases along -g.
    def f(x):
        return float(x[0]), np.array([-1.0])

    res = lbfgs_minimize(f, np.array([1.0]), max_iters=10)
    assert isinstance(res, LbfgsResult)
    assert res.line_search_failed
    assert res.x[0] == 1.0


def test_cosine_restart_schedule_restarts():
    base = 1e-4
    assert cosine_restart_lr(base, 0) == base
    assert cosine_restart_lr(base, 10) == base          # first restart
    assert cosine_restart_lr(base, 9) < cosine_restart_lr(base, 10)
    # second period is 20 epochs long (t_mult=2); epoch 30 = restart point
    assert cosine_restart_lr(base, 30) == base


def test_parameter_store_duplicate_rejected_and_order_sorted():
    store = ParameterStore()
    store.add("b", [1.0])
    store.add("a", [2.0])
    with pytest.raises(KeyError):
        store.add("a", [3.0])
    assert store.names() == ["a", "b"]
