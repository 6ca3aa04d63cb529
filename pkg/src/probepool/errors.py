"""Exception types shared across the package."""


class ProbePoolError(Exception):
    """Base class for all probepool errors."""


class DimensionError(ProbePoolError):
    """Shapes of two operands are incompatible."""


class NonFiniteError(ProbePoolError):
    """A NaN or Inf reached an operation that requires finite values."""


class DegenerateInputError(ProbePoolError):
    """An input is structurally unusable (e.g. a zero-norm vector where a
    direction is required)."""


class StoreFormatError(ProbePoolError):
    """An on-disk embedding store is malformed or mismatched."""


class NoPositivesError(ProbePoolError):
    """Average precision is undefined: no positive labels present."""


class EmptyStoreError(ProbePoolError):
    """An operation needs at least one record but the store has none."""


class CoverageError(ProbePoolError):
    """A result grid has a hole: some method is missing a configuration."""


class TrainingStateError(ProbePoolError):
    """A training-phase operation was called out of order."""
