"""Exception types shared across the library."""


class ZeroNormError(ValueError):
    """Vector norm is at or below the representable threshold."""


class DimensionMismatchError(ValueError):
    """Operands disagree on dimensionality or shape."""


class InvalidParameterError(ValueError):
    """A parameter is outside its legal domain."""


class NonFiniteError(ArithmeticError):
    """A NaN or infinity surfaced where a finite value is required."""


class AssumptionViolatedError(ValueError):
    """Inputs do not satisfy the preconditions of a closed-form result."""


class StaleCacheError(RuntimeError):
    """A backward pass received caches from a mismatched forward pass."""


class EmptyDatasetError(ValueError):
    """The operation needs at least one instance."""


class EmptyClassError(ValueError):
    """A requested class has no instances."""


class DuplicateLabelError(ValueError):
    """A label is already registered with the classifier."""


class NoVirtualPrototypesError(ValueError):
    """Marginalized inference needs at least one virtual prototype."""


class CoverageMismatchError(ValueError):
    """The classifier does not cover every class of the evaluation set."""


class InsufficientClassesError(ValueError):
    """The dataset has fewer classes than the session layout needs."""


class InsufficientShotsError(ValueError):
    """A class has fewer training instances than the requested shot count."""


class ParseError(ValueError):
    """A text input failed to parse; carries a 1-based line number when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


class RaggedRowsError(ParseError):
    """A delimited row has the wrong number of columns."""


class CheckpointError(RuntimeError):
    """Base class for checkpoint serialization failures."""


class VersionMismatchError(CheckpointError):
    """The checkpoint was written by an unsupported format version."""


class ChecksumMismatchError(CheckpointError):
    """The checkpoint payload does not match its trailing checksum."""


class SingleClassWarning(UserWarning):
    """Training data holds one class; the mixed-instance loss is inert."""
