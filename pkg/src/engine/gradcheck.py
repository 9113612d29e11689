"""
Finite-difference gradient checks used to validate every op and the full
network against the reverse-mode sweep.
"""

from collections.abc import Callable, Sequence

import numpy as np

from engine.tensor import Tensor, backward, no_grad

DEFAULT_STEP = 1e-4


def numerical_gradient(fn: Callable[[], Tensor], tensor: Tensor, eps: float = DEFAULT_STEP) -> np.ndarray:
    """
    Central differences of the scalar ``fn()`` with respect to ``tensor``.

    ``tensor.data`` is perturbed in place and restored element by element.
    """
    grad = np.zeros_like(tensor.data)
    with no_grad():
        for idx in np.ndindex(*tensor.shape):
            original = tensor.data[idx]
            tensor.data[idx] = original + eps
            plus = fn().item()
            tensor.data[idx] = original - eps
            minus = fn().item()
            tensor.data[idx] = original
            grad[idx] = (plus - minus) / (2.0 * eps)
    return grad


def analytic_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor]) -> list[np.ndarray]:
    """Reverse-mode gradients of ``fn()``; missing grads come back as zeros."""
    for t in inputs:
        t.grad = None
    backward(fn())
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """||a - n|| / max(||a||, ||n||, floor) over the whole tensor."""
    if not analytic.size:
        return 0.0
    denom = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), floor)
    return float(np.linalg.norm(analytic - numeric)) / denom


def check_gradients(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    eps: float = DEFAULT_STEP,
) -> float:
    """
    Largest relative error between reverse-mode and central-difference
    gradients over all ``inputs``.
    """
    analytic = analytic_gradients(fn, inputs)
    worst = 0.0
    for t, a in zip(inputs, analytic):
        worst = max(worst, relative_error(a, numerical_gradient(fn, t, eps)))
    return worst
