"""
Validation Module - utils/validation.py

PURPOSE:
--------
Single home for the phaseprof exception hierarchy and the small set of
validators used at module boundaries (tensor shapes, value ranges,
finiteness, probability mixtures).

Every exception carries an ``exit_code`` so the CLI can map failures to
process exit codes without inspecting messages:

    1  usage / IO / validation failure
    2  degenerate metric (reported, not fatal inside the library)
    3  numerical failure (NaN / Inf)

USAGE PATTERN:
-------------
    from utils.validation import require_shape, ShapeError

    require_shape("weight", weight.shape, rank=4)
"""

import logging
from collections.abc import Iterable, Sequence
from typing import Any, Optional

import numpy as np

logger = logging.getLogger(__name__)


# ============================================================================
# EXCEPTIONS
# ============================================================================

class PhaseProfError(Exception):
    """Base error for the whole package."""

    exit_code = 1


class ValidationError(PhaseProfError):
    """Invalid input value, with the offending field when known."""

    def __init__(self, message: str, field: Optional[str] = None, value: Any = None):
        self.message = message
        self.field = field
        self.value = value
        super().__init__(self.format_message())

    def format_message(self) -> str:
        if self.field:
            return f"Validation error on field '{self.field}': {self.message}"
        return f"Validation error: {self.message}"


class ShapeError(ValidationError):
    """Tensor shapes do not satisfy an operation's contract."""


class RangeValidationError(ValidationError):
    """A value lies outside its documented range."""


class ConfigurationError(ValidationError):
    """Invalid model, training or runtime configuration."""


class FormatError(ValidationError):
    """A binary container or sidecar file is malformed."""


class EmptyMaskError(PhaseProfError):
    """No labelled voxel is available where at least one is required."""


class DegenerateMetricError(PhaseProfError):
    """A metric is mathematically undefined for the given counts."""

    exit_code = 2


class NumericalError(PhaseProfError):
    """A computation produced NaN or Inf."""

    exit_code = 3

    def __init__(self, op: str, detail: str = "", batch_index: Optional[int] = None):
        self.op = op
        self.detail = detail
        self.batch_index = batch_index
        message = f"Non-finite values produced by '{op}'"
        if batch_index is not None:
            message += f" at batch {batch_index}"
        if detail:
            message += f": {detail}"
        super().__init__(message)


# ============================================================================
# VALIDATORS
# ============================================================================

def require_shape(
    name: str,
    shape: Sequence[int],
    rank: Optional[int] = None,
    expected: Optional[Sequence[Optional[int]]] = None,
) -> None:
    """
    Check rank and (optionally) individual dimensions of a shape.

    ``expected`` may contain ``None`` for dimensions that are free.

    Raises:
        ShapeError: on rank or dimension mismatch
    """
    shape = tuple(shape)
    if rank is not None and len(shape) != rank:
        raise ShapeError(f"expected rank {rank}, got shape {shape}", field=name, value=shape)
    if expected is not None:
        if len(expected) != len(shape):
            raise ShapeError(f"expected shape {tuple(expected)}, got {shape}", field=name, value=shape)
        for got, want in zip(shape, expected):
            if want is not None and got != want:
                raise ShapeError(f"expected shape {tuple(expected)}, got {shape}", field=name, value=shape)


def require_range(
    name: str,
    value: float,
    low: Optional[float] = None,
    high: Optional[float] = None,
    inclusive: bool = True,
) -> None:
    """Raise RangeValidationError if value is outside [low, high]."""
    if low is not None and (value < low if inclusive else value <= low):
        raise RangeValidationError(f"must be >{'=' if inclusive else ''} {low}", field=name, value=value)
    if high is not None and (value > high if inclusive else value >= high):
        raise RangeValidationError(f"must be <{'=' if inclusive else ''} {high}", field=name, value=value)


def require_finite(op: str, array: np.ndarray) -> None:
    """Raise NumericalError naming ``op`` if the array holds NaN or Inf."""
    if not np.all(np.isfinite(array)):
        bad = int(np.size(array) - np.count_nonzero(np.isfinite(array)))
        raise NumericalError(op, f"{bad} non-finite value(s)")


def require_fractions(name: str, fractions: Iterable[float], tol: float = 1e-6) -> tuple[float, ...]:
    """Validate a probability mixture: non-negative entries summing to 1."""
    values = tuple(float(f) for f in fractions)
    if any(v < 0 for v in values):
        raise RangeValidationError("fractions must be non-negative", field=name, value=values)
    if abs(sum(values) - 1.0) > tol:
        raise RangeValidationError(f"fractions must sum to 1 (got {sum(values):.8f})", field=name, value=values)
    return values


def require_codes(name: str, values: np.ndarray, allowed: Iterable[int]) -> None:
    """Raise RangeValidationError if ``values`` holds codes outside ``allowed``."""
    allowed_set = set(int(a) for a in allowed)
    present = set(np.unique(values).tolist())
    unknown = sorted(present - allowed_set)
    if unknown:
        raise RangeValidationError(
            f"unexpected codes {unknown}; allowed {sorted(allowed_set)}",
            field=name,
            value=unknown,
        )
