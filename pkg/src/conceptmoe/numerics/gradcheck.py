"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def numerical_grad(
    fn: Callable[[], Tensor], t: Tensor, h: float = 1e-5
) -> np.ndarray:
    """d fn() / d t by central differences, perturbing ``t.data`` in place."""
    g = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = g.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn().item()
            flat[i] = orig - h
            fm = fn().item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> float:
    """||a - n|| / max(||a||, ||n||, floor), measured over the whole tensor."""
    diff = float(np.linalg.norm(analytic - numeric))
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), floor)
    return diff / scale


def check_gradients(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
) -> float:
    """Largest relative error between reverse-mode and finite-difference grads.

    ``fn`` must rebuild the scalar loss from ``inputs`` on every call.
    """
    for t in inputs:
        t.grad = None
    fn().backward()
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numerical_grad(fn, t, h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
