"""
Adam optimizer with bias correction.

Defaults are the conventional ones (beta1=0.9, beta2=0.999, eps=1e-8).
The optimizer state is owned by a single training loop.
"""

import logging
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from engine.tensor import Tensor
from utils.validation import NumericalError, RangeValidationError, ShapeError

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """Per-parameter first/second moments plus the step counter."""
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_parameters(cls, params: Mapping[str, Tensor], **hyper: float) -> "AdamState":
        state = cls(**hyper)  # type: ignore[arg-type]
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, Optional[np.ndarray]],
    state: AdamState,
    lr: float,
) -> AdamState:
    """
    One Adam update, applied in place to ``params[name].data``.

    A missing gradient counts as zero. The step is aborted before any
    parameter moves if a gradient holds NaN/Inf.

    Raises:
        RangeValidationError: lr <= 0
        ShapeError: gradient shape differs from its parameter
        NumericalError: non-finite gradient
    """
    if not lr > 0:
        raise RangeValidationError("learning rate must be positive", field="lr", value=lr)

    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.data.shape}", field=name, value=g.shape)
        if not np.all(np.isfinite(g)):
            raise NumericalError("adam_step", f"non-finite gradient for '{name}'")

    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    step_size = lr / bc1

    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= step_size * m / (np.sqrt(v / bc2) + state.eps)

    return state
