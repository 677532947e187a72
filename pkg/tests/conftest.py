import numpy as np
import pytest

from ssm4rec import numerics as nx
from ssm4rec.numerics import Graph, Tensor


@pytest.fixture
def f64():
    with nx.precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def numeric_grad(f, arr, h=1e-5):
    """Central differences of scalar ``f()`` with respect to ``arr`` (modified in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        up = f()
        arr[i] = old - h
        down = f()
        arr[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_error(analytic, numeric, floor=1e-6):
    a, n = np.asarray(analytic), np.asarray(numeric)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def gradcheck(fn, inputs, seed=0, h=1e-5):
    """Max relative error between tape gradients and central differences.

    ``fn(*tensors)`` returns a tensor; it is contracted with a fixed random
    projection to obtain a scalar.
    """
    tensors = [Tensor(x, requires_grad=True, dtype=np.float64) for x in inputs]
    with Graph():
        probe = fn(*tensors)
    proj = np.random.default_rng(seed).standard_normal(probe.shape)

    with Graph() as g:
        out = fn(*tensors)
        loss = nx.tsum(nx.mul(out, proj))
        g.backward(loss)

    def scalar():
        return float((fn(*tensors).data * proj).sum())

    worst = 0.0
    for t in tensors:
        num = numeric_grad(scalar, t.data, h)
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, rel_error(ana, num))
    return worst
