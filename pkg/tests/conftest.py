import numpy as np
import pytest


def central_diff(loss_fn, arrays, h=1e-5):
    """Central finite differences of ``loss_fn()`` w.r.t. every entry of ``arrays`` (perturbed in place)."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            up = loss_fn()
            a[i] = old - h
            down = loss_fn()
            a[i] = old
            g[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def rel_error(analytic, numeric):
    """Norm-relative gap between two gradient arrays."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-10)
    return float(np.linalg.norm(a - n) / scale)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
