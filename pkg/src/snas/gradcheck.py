"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


def numeric_grad(fn: Callable[[], Tensor], wrt: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central-difference derivative of the scalar ``fn()`` w.r.t. ``wrt``.

    ``fn`` is evaluated with no tape active and must read ``wrt.data``
    afresh on every call.
    """
    grad = np.zeros_like(wrt.data, dtype=np.float64)
    flat = wrt.data.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(fn().data)
        flat[i] = orig - eps
        fm = float(fn().data)
        flat[i] = orig
        g[i] = (fp - fm) / (2 * eps)
    return grad


def analytic_grads(fn: Callable[[], Tensor], wrt: Sequence[Tensor]) -> list[np.ndarray]:
    for t in wrt:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    return [np.zeros_like(t.data) if t.grad is None else t.grad for t in wrt]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Largest elementwise discrepancy, scaled by the gradient's magnitude.

    Each entry's error is divided by ``max(|a_i|, |n_i|, s)`` where ``s`` is
    a small fraction of the largest entry, so entries that vanish
    analytically do not turn rounding noise into huge ratios.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), max(1e-3 * scale, floor))
    return float((np.abs(a - n) / denom).max(initial=0.0))


def check_gradients(fn: Callable[[], Tensor], wrt: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences."""
    grads = analytic_grads(fn, wrt)
    worst = 0.0
    for t, g in zip(wrt, grads):
        worst = max(worst, relative_error(g, numeric_grad(fn, t, eps)))
    return worst


def numeric_grad_at(fn: Callable[[], Tensor], wrt: Tensor, indices: Sequence[int], eps: float = 1e-6) -> np.ndarray:
    """Central differences at selected flat positions only."""
    flat = wrt.data.reshape(-1)
    out = np.zeros(len(indices), dtype=np.float64)
    for n, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(fn().data)
        flat[i] = orig - eps
        fm = float(fn().data)
        flat[i] = orig
        out[n] = (fp - fm) / (2 * eps)
    return out
