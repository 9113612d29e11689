# Utility modules
from .validation import (
    PhaseProfError,
    ValidationError,
    ShapeError,
    RangeValidationError,
    ConfigurationError,
    FormatError,
    EmptyMaskError,
    DegenerateMetricError,
    NumericalError,
    require_shape,
    require_range,
    require_finite,
)
