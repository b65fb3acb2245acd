"""Exception taxonomy shared across the toolkit.

The CLI maps these onto exit codes: validation-type failures exit 1,
trainer/protocol failures exit 2.
"""

from __future__ import annotations


class SliceKitError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(SliceKitError):
    """Input data violates a documented invariant."""


class ShapeError(ValidationError):
    """Array dimensions do not line up."""


class InvalidLabelError(ValidationError):
    """A class label falls outside [0, num_classes)."""


class InsufficientDataError(ValidationError):
    """Too few datapoints for the requested operation."""


class RangeError(ValidationError):
    """A numeric argument falls outside its allowed range."""


class ConfigError(ValidationError):
    """Unknown variant name, infeasible generator spec, or bad flag combo."""


class UnsupportedModeError(SliceKitError):
    """Operation is undefined for the model's modality mode."""


class UndefinedEfficacyError(SliceKitError):
    """Efficacy of an empty selection; reported as N/A, never 0."""


class FeatureNotApplicableError(SliceKitError):
    """No mispredicted point carries the feature, so no target set exists."""


class ProtocolError(SliceKitError):
    """External trainer violated the request/response contract."""
