"""Shared test utilities: the finite-difference gradient oracle.

The oracle only ever calls forward passes, so it stays independent of the
backward implementation it is used to check.
"""

import numpy as np

from dff.tensor import backward


def fd_grad(build_loss, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar-valued closure w.r.t. arr.

    ``build_loss`` must rerun the forward pass from scratch and return a
    python float; ``arr`` is perturbed in place and restored.
    """
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = build_loss()
        flat[i] = orig - h
        fm = build_loss()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Relative error with a unit floor so near-zero gradients compare sanely."""
    denom = np.maximum(np.abs(numeric), 1.0)
    return float((np.abs(analytic - numeric) / denom).max())


def check_gradients(build, params, rtol: float = 1e-4, h: float = 1e-5) -> float:
    """Backprop through build() and compare every param against fd_grad.

    ``build`` returns a fresh scalar loss Tensor each call.  Returns the
    worst relative error observed (also asserted against ``rtol``).
    """
    for p in params:
        p.zero_grad()
    backward(build())
    worst = 0.0
    for p in params:
        numeric = fd_grad(lambda: build().item(), p.data, h=h)
        err = max_rel_err(p.grad, numeric)
        worst = max(worst, err)
        assert err < rtol, f"gradient mismatch: rel err {err:.3e} >= {rtol}"
    return worst
