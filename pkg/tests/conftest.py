"""Shared test helpers: finite-difference oracles and error metrics."""

import numpy as np


def fd_grad(f, x, eps=1e-5):
    """Central-difference gradient of a scalar function at array x."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.ravel(), grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def fd_scalar(f, x, eps=1e-5):
    """Central difference for a scalar parameter."""
    return (f(x + eps) - f(x - eps)) / (2.0 * eps)


def max_rel_err(analytic, numeric, floor=1e-4):
    """Max elementwise relative error with a magnitude floor.

    The floor keeps near-zero gradients from amplifying finite-difference
    noise while leaving the check fully relative for material gradients.
    """
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
