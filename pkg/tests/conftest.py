import numpy as np
import pytest


def random_orthogonal(rng, d):
    Q, R = np.linalg.qr(rng.standard_normal((d, d)))
    return Q * np.sign(np.diag(R))


def random_spd(rng, d, cond=10.0):
    """Random SPD matrix with the requested condition number."""
    Q = random_orthogonal(rng, d)
    if d == 1:
        w = np.array([1.0])
    else:
        w = np.logspace(0.0, -np.log10(cond), d)
    return (Q * w) @ Q.T


def random_sym(rng, d, scale=1.0):
    A = rng.standard_normal((d, d))
    return scale * 0.5 * (A + A.T)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
