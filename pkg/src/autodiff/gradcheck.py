# Finite-difference verification of the analytic gradients.
# Intended for float64 tensors created under wide_precision().

from typing import Callable, Sequence

import numpy as np

from src.autodiff.tensor import Tensor, backward, get_tape, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||, 1e-12)"""
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), 1e-12)
    return float(np.linalg.norm(analytic - numeric)) / scale


def numerical_gradient(fn: Callable[[], Tensor], target: Tensor, step: float = 1e-3) -> np.ndarray:
    """Central differences of the scalar ``fn()`` with respect to ``target.data``."""
    grad = np.zeros_like(target.data)
    flat = target.data.reshape(-1)
    flat_grad = grad.reshape(-1)
    with no_grad():
        for index in range(flat.size):
            original = flat[index]
            flat[index] = original + step
            plus = float(fn().data)
            flat[index] = original - step
            minus = float(fn().data)
            flat[index] = original
            flat_grad[index] = (plus - minus) / (2 * step)
    return grad


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-3) -> float:
    """Worst relative error between backward() and central differences over ``inputs``."""
    for tensor in inputs:
        tensor.zero_grad()
    get_tape().reset()
    backward(fn())

    worst = 0.0
    for tensor in inputs:
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        numeric = numerical_gradient(fn, tensor, step)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
