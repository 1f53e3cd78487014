import numpy as np
import pytest

from dbadapt.autodiff import POLYNOMIAL_OPS, SGD, Adam, Tensor, graph_ops, parameter


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        up = f(x)
        x[i] = old - h
        down = f(x)
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def check(fn, *shapes, seed=0, positive=False, rtol=1e-5):
    rng = np.random.default_rng(seed)
    xs = [rng.uniform(0.5, 2.0, s) if positive else rng.normal(size=s) for s in shapes]
    params = [parameter(x.copy()) for x in xs]
    out = fn(*params).sum()
    out.backward()
    for k, x in enumerate(xs):
        def scalar(v, k=k):
            args = [Tensor(v if j == k else xs[j]) for j in range(len(xs))]
            return float(fn(*args).sum().data)

        np.testing.assert_allclose(params[k].grad, numeric_grad(scalar, x.copy()), rtol=rtol, atol=1e-7)


@pytest.mark.parametrize(
    "fn,shapes",
    [
        (lambda a, b: a + b, [(3, 4), (4,)]),
        (lambda a, b: a - b, [(3, 4), (3, 1)]),
        (lambda a, b: a * b, [(2, 3), (2, 3)]),
        (lambda a, b: a @ b, [(2, 3, 4), (4, 5)]),
        (lambda a: (a * a).mean(axis=-1), [(3, 4)]),
        (lambda a: a.reshape(6, 2).transpose(1, 0) * 2.0, [(3, 4)]),
        (lambda a: a.swapaxes(0, 1) @ a, [(3, 4)]),
        (lambda a: a.take(np.array([2, 0, 2]), axis=0), [(3, 4)]),
        (lambda a: a[1:, ::2] * 3.0, [(3, 4)]),
        (lambda a: a.exp(), [(3,)]),
        (lambda a: a.gelu(), [(5,)]),
        (lambda a: -a**3, [(4,)]),
        (lambda a, b: a / b, [(3,), (3,)]),
    ],
)
def test_gradients_match_finite_differences(fn, shapes):
    check(fn, *shapes)


@pytest.mark.parametrize("fn", [lambda a: a.log(), lambda a: a.sqrt(), lambda a: a.reciprocal(), lambda a: 1.0 / a])
def test_gradients_positive_domain(fn):
    check(fn, (4,), positive=True)


def test_backward_accumulates_shared_nodes():
    x = parameter(np.array([3.0]))
    y = x * x + x
    y.backward()
    assert x.grad[0] == pytest.approx(7.0)


def test_graph_ops_record_operations():
    x = parameter(np.ones((2, 2)))
    y = (x @ x + 1.0).sum()
    assert graph_ops(y) <= POLYNOMIAL_OPS
    assert "exp" in graph_ops(x.exp().sum())


def test_sgd_step():
    p = parameter(np.array([1.0, -2.0]))
    (p * p).sum().backward()
    SGD([p], 0.1).step()
    np.testing.assert_allclose(p.data, [0.8, -1.6])


def test_adam_minimizes_quadratic():
    p = parameter(np.array([5.0, -3.0]))
    opt = Adam([p], 0.1)
    for _ in range(500):
        opt.zero_grad()
        ((p - 1.0) * (p - 1.0)).sum().backward()
        opt.step()
    np.testing.assert_allclose(p.data, [1.0, 1.0], atol=1e-3)
