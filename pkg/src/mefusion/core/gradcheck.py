"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, default_dtype, no_grad


def numerical_grads(fn: Callable, inputs: Sequence[np.ndarray], weights: np.ndarray, eps: float = 1e-6):
    """Central differences of ``sum(fn(*inputs) * weights)``, evaluated in float64."""
    base = [np.array(x, dtype=np.float64) for x in inputs]
    grads = []
    with default_dtype(np.float64), no_grad():
        def objective(arrays):
            return float((fn(*[Tensor(a) for a in arrays]).data * weights).sum())

        for k, arr in enumerate(base):
            g = np.zeros_like(arr)
            flat = arr.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = objective(base)
                flat[i] = orig - eps
                down = objective(base)
                flat[i] = orig
                gflat[i] = (up - down) / (2 * eps)
            grads.append(g)
    return grads


def analytic_grads(fn: Callable, inputs: Sequence[np.ndarray], weights: np.ndarray, dtype=np.float32):
    with default_dtype(dtype):
        tensors = [Tensor(np.asarray(x, dtype=dtype), requires_grad=True) for x in inputs]
        out = fn(*tensors)
        (out * Tensor(weights.astype(dtype))).sum().backward()
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def check_gradients(fn: Callable, inputs: Sequence[np.ndarray], dtype=np.float32, rng=None, eps: float = 1e-6) -> float:
    """Worst relative error between analytic (``dtype``) and float64 finite-difference gradients.

    The scalar objective is a fixed random projection of ``fn``'s output so
    every output element contributes.
    """
    rng = rng or np.random.default_rng(0)
    with default_dtype(np.float64), no_grad():
        shape = fn(*[Tensor(np.asarray(x, dtype=np.float64)) for x in inputs]).shape
    weights = rng.standard_normal(shape)
    analytic = analytic_grads(fn, inputs, weights, dtype)
    numeric = numerical_grads(fn, inputs, weights, eps)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))
