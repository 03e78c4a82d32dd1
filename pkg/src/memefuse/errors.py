"""Exception types shared across the package."""


class MemefuseError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(MemefuseError):
    """Tensor shapes are incompatible for the requested operation."""


class TapeError(MemefuseError):
    """Misuse of a differentiation tape (double backward, non-scalar root)."""


class InputError(MemefuseError):
    """Invalid user-supplied data or configuration."""


class ParseError(InputError):
    """A data file could not be parsed; message carries the line number."""


class IntegrityError(InputError):
    """A dataset violates an integrity constraint (e.g. duplicate ids)."""


class EvaluationError(MemefuseError):
    """A metric is undefined for the given inputs (e.g. single-class AUROC)."""
