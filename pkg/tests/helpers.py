"""Shared test utilities: finite-difference oracles and error measures."""

import numpy as np


def numerical_gradient(f, x, eps=1e-5):
    """Central finite differences of a scalar function of one array.

    ``f`` is called with the perturbed array; it must rebuild whatever
    graph it needs from the raw values each time, so the oracle stays
    independent of the autodiff path it checks.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        fp = f(x)
        x[idx] = orig - eps
        fm = f(x)
        x[idx] = orig
        g[idx] = (fp - fm) / (2.0 * eps)
        it.iternext()
    return g


def rel_error(a, b):
    """Normwise relative disagreement, robust near zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    if denom == 0.0:
        return 0.0
    return np.linalg.norm(a - b) / denom


def check_param_gradient(loss_fn, param, eps=1e-5):
    """Compare the analytic gradient already stored on ``param`` against
    central differences of ``loss_fn`` (which evaluates the forward pass
    from current parameter values). Returns the relative error."""
    assert param.grad is not None, "run backward() before checking"
    analytic = param.grad.copy()

    def probe(arr):
        param.data = arr
        return loss_fn()

    numeric = numerical_gradient(probe, param.data, eps)
    return rel_error(analytic, numeric)
