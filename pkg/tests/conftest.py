import numpy as np
import pytest

from imponderous.tensor import Variable, mul, sum_all


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def var64(rng, *shape, requires_grad=True):
    return Variable(rng.uniform(-1, 1, size=shape).astype(np.float64), requires_grad=requires_grad)


def probe(y, seed=7):
    """Scalar ``sum(y * R)`` with a fixed random R, so every output gets a distinct weight."""
    r = np.random.default_rng(seed).uniform(-1, 1, size=y.shape).astype(y.dtype)
    return sum_all(mul(y, Variable(r)))


def separated64(rng, *shape, gap=0.01):
    """Distinct values at least ``gap`` apart, so max-type ops have no near-ties within h."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n) - n / 2) * gap
    return Variable(vals.reshape(shape).astype(np.float64), requires_grad=True)
