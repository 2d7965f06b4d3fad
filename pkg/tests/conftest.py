import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def central_diff(f, arrays, h=1e-5):
    """Central finite-difference gradient of scalar f w.r.t. each array.

    f receives plain numpy arrays and must return a float. This is the
    independent oracle for every analytic-gradient check: it never touches
    the tape machinery of the op under test.
    """
    grads = []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a, dtype=np.float64)
        flat = g.reshape(-1)
        base = [np.array(x, dtype=np.float64) for x in arrays]
        for j in range(a.size):
            plus = [b.copy() for b in base]
            minus = [b.copy() for b in base]
            plus[i].reshape(-1)[j] += h
            minus[i].reshape(-1)[j] -= h
            flat[j] = (f(*plus) - f(*minus)) / (2 * h)
        grads.append(g)
    return grads


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
