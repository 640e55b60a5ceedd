"""Exception hierarchy shared by every module.

The CLI maps these onto its exit codes: validation-type errors exit 1,
IO errors exit 2, numeric failures exit 3.
"""


class LayerDecompError(Exception):
    """Base class for all package errors."""


class ValidationError(LayerDecompError, ValueError):
    """Input violates a documented invariant (bad bbox, bad manifest, ...)."""


class ShapeError(ValidationError):
    """Incompatible tensor shapes."""


class ParameterError(ValidationError):
    """A scalar parameter is outside its admissible range."""


class ConfigError(ValidationError):
    """Inconsistent configuration."""


class ContractError(ValidationError):
    """A caller broke an operation precondition."""


class CapacityError(ValidationError):
    """Input exceeds a configured capacity (layers, tokens)."""


class AlignmentError(ValidationError):
    """Guidance tokens and sequence segments disagree."""


class VocabularyError(ValidationError):
    """Unknown prompt token."""


class CorrespondenceError(ValidationError):
    """Predicted and ground-truth layers cannot be matched positionally."""


class StackLoadError(LayerDecompError, OSError):
    """A stack manifest or one of its files could not be read."""


class NumericError(LayerDecompError, ArithmeticError):
    """NaN or Inf encountered during a numeric computation."""
