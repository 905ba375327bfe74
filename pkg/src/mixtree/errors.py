"""Exception types shared across the package."""


class MixtreeError(Exception):
    """Base class for all package-specific errors."""


class NotPositiveDefinite(MixtreeError):
    """A matrix expected to be symmetric positive definite is not.

    Raised when a Cholesky pivot falls below the scale-relative tolerance,
    or when a Schur-complement block is singular. Callers typically respond
    by regularizing the source covariance.
    """


class DimensionMismatch(MixtreeError):
    """Operands have incompatible shapes or index sets."""


class IndexAlreadyPresent(MixtreeError):
    """Attempted to insert a variable already covered by a factor."""


class IndexNotPresent(MixtreeError):
    """Attempted to remove a variable not covered by a factor."""


class InvalidConfig(MixtreeError):
    """Training or CLI configuration failed validation."""


class NumericalError(MixtreeError):
    """A numerical procedure failed beyond recoverable fallbacks."""


class DataError(MixtreeError):
    """Base class for dataset ingestion and shape problems."""


class ParseError(DataError):
    """A CSV cell could not be parsed; carries (row, col) location."""

    def __init__(self, row, col, token):
        self.row = row
        self.col = col
        self.token = token
        super().__init__(f"cannot parse cell at row {row}, column {col}: {token!r}")


class RaggedRows(DataError):
    """CSV rows do not all have the same number of fields."""


class ShapeMismatch(DataError):
    """Array shapes are inconsistent with the declared layout."""


class IncompleteReference(DataError):
    """A reference dataset required to be complete has missing cells."""


class SingularSystem(MixtreeError):
    """A linear system (e.g. kernel ridge normal equations) is singular."""


class EngineDivergence(MixtreeError):
    """Fast and naive EM engines disagree beyond tolerance."""
