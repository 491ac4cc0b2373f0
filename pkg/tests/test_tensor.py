"""Autodiff engine checks against the finite-difference oracle."""

import numpy as np
import pytest

from duomotion.tensor import NonFiniteError, Tensor, concat, softmax, stack
from duomotion.optim import ParameterStore, grad

from oracles import central_differences, fd_close


def test_sum_of_squares_gradient():
    store = ParameterStore()
    p = store.add("p", [1.0, 2.0, 3.0])
    loss = (p * p).sum()
    g = grad(loss, store)
    assert np.allclose(g["p"], [2.0, 4.0, 6.0])


def test_constant_loss_gives_zero_gradient():
    store = ParameterStore()
    p = store.add("p", [1.0, 2.0])
    q = store.add("q", [[3.0, 4.0]])
    loss = (p * p).sum()
    g = grad(loss, store)
    assert np.all(g["q"] == 0.0)
    assert g["q"].shape == q.data.shape


def test_nonscalar_loss_rejected():
    store = ParameterStore()
    p = store.add("p", [1.0, 2.0])
    with pytest.raises(ValueError):
        grad(p * p, store)


def test_two_layer_perceptron_matches_finite_differences():
    rng = np.random.default_rng(7)
    w1 = rng.normal(size=(4, 5))
    b1 = rng.normal(size=(5,))
    w2 = rng.normal(size=(5, 1))
    x = rng.normal(size=(3, 4))

    def build(flat):
        store = ParameterStore()
        i = 0
        for name, ref in (("w1", w1), ("b1", b1), ("w2", w2)):
            store.add(name, flat[i:i + ref.size].reshape(ref.shape))
            i += ref.size
        h = (Tensor(x) @ store["w1"] + store["b1"]).tanh()
        return (h @ store["w2"]).sum(), store

    flat0 = np.concatenate([w1.ravel(), b1.ravel(), w2.ravel()])
    loss, store = build(flat0)
    gmap = grad(loss, store)
    ad = np.concatenate([gmap["w1"].ravel(), gmap["b1"].ravel(), gmap["w2"].ravel()])
    fd = central_differences(lambda f: build(f)[0].item(), flat0)
    assert fd_close(ad, fd)


def _unary_ops():
    return [
        ("exp", lambda t: t.exp(), lambda r: r.normal(size=(3, 4))),
        ("log", lambda t: t.log(), lambda r: r.uniform(0.5, 3.0, size=(3, 4))),
        ("sqrt", lambda t: t.sqrt(), lambda r: r.uniform(0.5, 3.0, size=(6,))),
        ("sin", lambda t: t.sin(), lambda r: r.normal(size=(2, 5))),
        ("cos", lambda t: t.cos(), lambda r: r.normal(size=(2, 5))),
        ("tanh", lambda t: t.tanh(), lambda r: r.normal(size=(7,))),
        ("relu", lambda t: t.relu(), lambda r: r.normal(size=(4, 4)) + 0.05),
        ("abs", lambda t: t.abs(), lambda r: r.normal(size=(4, 4)) + 0.05),
        ("pow3", lambda t: t ** 3, lambda r: r.normal(size=(5,))),
        ("neg", lambda t: -t, lambda r: r.normal(size=(5,))),
        ("mean", lambda t: t.mean(axis=0), lambda r: r.normal(size=(3, 4))),
        ("sum_ax", lambda t: t.sum(axis=1), lambda r: r.normal(size=(3, 4))),
        ("reshape", lambda t: t.reshape(2, 6), lambda r: r.normal(size=(3, 4))),
        ("swap", lambda t: t.swapaxes(0, 1), lambda r: r.normal(size=(3, 4))),
        ("slice", lambda t: t[1:, :2], lambda r: r.normal(size=(3, 4))),
        ("softmax", lambda t: softmax(t, axis=-1), lambda r: r.normal(size=(3, 4))),
    ]


@pytest.mark.parametrize("name,op,make", _unary_ops(), ids=[o[0] for o in _unary_ops()])
def test_unary_op_gradients_match_fd(name, op, make):
    rng = np.random.default_rng(hash(name) % 2**32)
    x0 = make(rng)

    def f(flat):
        t = Tensor(flat.reshape(x0.shape), requires_grad=True)
        out = op(t)
        return (out * np.arange(1, out.size + 1).reshape(out.shape)).sum(), t

    loss, t = f(x0.ravel())
    loss.backward()
    fd = central_differences(lambda v: f(v)[0].item(), x0.ravel())
    assert fd_close(t.grad.ravel(), fd)


def _binary_ops():
    return [
        ("add", lambda a, b: a + b, (3, 4), (3, 4)),
        ("add_bcast", lambda a, b: a + b, (3, 4), (4,)),
        ("sub", lambda a, b: a - b, (3, 4), (1, 4)),
        ("mul", lambda a, b: a * b, (2, 5), (2, 5)),
        ("div", lambda a, b: a / (b * b + 1.0), (2, 5), (5,)),
        ("matmul", lambda a, b: a @ b, (3, 4), (4, 2)),
        ("matmul_batch", lambda a, b: a @ b, (2, 3, 4), (4, 2)),
        ("maximum", lambda a, b: a.maximum(b), (3, 4), (3, 4)),
    ]


@pytest.mark.parametrize("name,op,sa,sb", _binary_ops(), ids=[o[0] for o in _binary_ops()])
def test_binary_op_gradients_match_fd(name, op, sa, sb):
    rng = np.random.default_rng(hash(name) % 2**32)
    a0 = rng.normal(size=sa)
    b0 = rng.normal(size=sb) + 0.1

    def f(flat):
        a = Tensor(flat[:a0.size].reshape(sa), requires_grad=True)
        b = Tensor(flat[a0.size:].reshape(sb), requires_grad=True)
        out = op(a, b)
        return (out * out).sum(), a, b

    flat0 = np.concatenate([a0.ravel(), b0.ravel()])
    loss, a, b = f(flat0)
    loss.backward()
    ad = np.concatenate([a.grad.ravel(), b.grad.ravel()])
    fd = central_differences(lambda v: f(v)[0].item(), flat0)
    assert fd_close(ad, fd)


def test_concat_and_stack_gradients():
    rng = np.random.default_rng(3)
    a0 = rng.normal(size=(2, 3))
    b0 = rng.normal(size=(2, 3))

    def f(flat):
        a = Tensor(flat[:6].reshape(2, 3), requires_grad=True)
        b = Tensor(flat[6:].reshape(2, 3), requires_grad=True)
        out = concat([a, b], axis=1) + stack([a, b], axis=0).sum(axis=0)[:, :3].sum()
        return (out ** 2).sum(), a, b

    flat0 = np.concatenate([a0.ravel(), b0.ravel()])
    loss, a, b = f(flat0)
    loss.backward()
    ad = np.concatenate([a.grad.ravel(), b.grad.ravel()])
    fd = central_differences(lambda v: f(v)[0].item(), flat0)
    assert fd_close(ad, fd)


def test_shared_subexpression_accumulates():
    x = Tensor([2.0], requires_grad=True)
    y = x * x      # used twice below
    loss = (y + y).sum()
    loss.backward()
    assert np.allclose(x.grad, [8.0])


def test_nonfinite_forward_raises():
    x = Tensor([1.0, 0.0], requires_grad=True)
    with pytest.raises(NonFiniteError):
        x.log()


def test_getitem_integer_array_gather():
    x = Tensor(np.arange(12, dtype=float).reshape(3, 4), requires_grad=True)
    idx = np.array([0, 2, 2])
    out = x[idx]
    loss = (out * out).sum()
    loss.backward()
    expected = np.zeros((3, 4))
    expected[0] = 2 * x.data[0]
    expected[2] = 2 * 2 * x.data[2]
    assert np.allclose(x.grad, expected)
