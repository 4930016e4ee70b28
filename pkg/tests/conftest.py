"""Shared test helpers: a finite-difference gradient oracle and dataset
discovery for the optional real-data checks."""

import os

import numpy as np

# Real turbofan data is looked up here (override with CMAPSS_DIR); the
# dataset-backed checks skip cleanly when it is absent.
CMAPSS_DIR = os.environ.get(
    "CMAPSS_DIR", os.path.join(os.path.dirname(__file__), "..", "data", "CMAPSS")
)


def cmapss_available(tag: str = "FD001") -> bool:
    return os.path.isfile(os.path.join(CMAPSS_DIR, f"train_{tag}.txt"))


def finite_diff_grads(loss_fn, params, h=1e-5):
    """Central-difference gradients of a scalar loss for every param entry.

    loss_fn() must recompute the loss as a float from the current contents
    of the arrays in ``params``; entries are perturbed in place and restored.
    This path shares no code with the tape's backward rules.
    """
    out = {}
    for name, arr in params.items():
        grad = np.zeros_like(arr)
        flat = arr.ravel()
        gflat = grad.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = loss_fn()
            flat[i] = orig - h
            f_minus = loss_fn()
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * h)
        out[name] = grad
    return out


def max_rel_err(got, want, floor=1e-6):
    """Worst elementwise relative error between two dicts of arrays."""
    worst = 0.0
    for name in want:
        a = np.asarray(got[name], dtype=float)
        b = np.asarray(want[name], dtype=float)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
        if a.size:
            worst = max(worst, float(np.max(np.abs(a - b) / denom)))
    return worst
