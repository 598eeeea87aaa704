"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, reset_tape


def numerical_grad(fn: Callable[[], float], arr: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """d fn / d arr by central differences, perturbing ``arr`` in place."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = fn()
        flat[i] = orig - step
        fm = fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm error scaled by the larger of the two gradients' max-norms."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-10)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def grad_check(op: Callable[..., Tensor], shapes: Sequence[tuple], seed: int = 0,
               step: float = 1e-5, inputs: Sequence[np.ndarray] | None = None) -> float:
    """Worst relative error between autodiff and finite differences.

    ``op`` receives one float64 Tensor per entry of ``shapes`` and returns a
    Tensor of any shape; it is reduced to a scalar with fixed random weights
    so every output element contributes.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in inputs] if inputs is not None else [
        rng.standard_normal(s) for s in shapes
    ]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = op(*tensors)
    weights = rng.standard_normal(out.shape)

    loss = (out * weights).sum()
    backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def evaluate() -> float:
        plain = [Tensor(t.data) for t in tensors]
        val = float((op(*plain).data * weights).sum())
        reset_tape()
        return val

    worst = 0.0
    for t, a in zip(tensors, analytic):
        num = numerical_grad(evaluate, t.data, step)
        worst = max(worst, relative_error(a, num))
    return worst
