"""Exception categories shared across the toolkit.

The CLI maps each category to an error line prefix, so new exceptions
should subclass one of these rather than a bare ``Exception``.
"""


class CtBiasError(Exception):
    category = "error"


class ValidationError(CtBiasError, ValueError):
    category = "validation"


class FormatError(CtBiasError, ValueError):
    category = "format"


class UnsupportedError(CtBiasError, ValueError):
    category = "unsupported"


class TruncatedError(CtBiasError, IOError):
    category = "io"


class BoundsError(CtBiasError, IndexError):
    category = "bounds"


class EmptyMaskError(CtBiasError):
    category = "empty-mask"


class PlacementError(CtBiasError):
    category = "placement-infeasible"

    def __init__(self, message, attempts=0):
        super().__init__(message)
        self.attempts = attempts


class InfeasibleQuotaError(ValidationError):
    category = "infeasible-quota"

    def __init__(self, message, cells=()):
        super().__init__(message)
        self.cells = list(cells)


class ShapeError(CtBiasError, ValueError):
    category = "shape"


class StateError(CtBiasError, RuntimeError):
    category = "state"


class DivergenceError(CtBiasError, FloatingPointError):
    category = "divergence"

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class ClassError(CtBiasError, ValueError):
    """Raised when a metric needs both classes but only one is present."""

    category = "class"


class AlignmentError(CtBiasError, ValueError):
    category = "alignment"


class InsufficientModelsError(CtBiasError):
    category = "insufficient-models"

    def __init__(self, message, ledger=None):
        super().__init__(message)
        self.ledger = ledger or {}
