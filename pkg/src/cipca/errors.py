"""Exception hierarchy shared across the package."""


class CipcaError(Exception):
    """Base class for all package errors."""


class ParseError(CipcaError):
    """Raised when an input file cannot be parsed."""


class ValidationError(CipcaError):
    """Raised when input data violates a structural invariant."""


class DegenerateColumnError(CipcaError):
    """A characteristic column has too little cross-sectional variation."""


class EmptyMonthError(CipcaError):
    """All assets were excluded from a month."""


class UndefinedCorrelationError(CipcaError):
    """A rank correlation is undefined in every available month."""


class DomainError(CipcaError):
    """An input is outside the mathematical domain of an operation."""


class InfeasibleSplitError(CipcaError):
    """The splitting phase cannot reach the requested sub-cluster count."""


class RankDeficiencyError(CipcaError):
    """A Gram or covariance matrix is singular."""


class EstimationError(CipcaError):
    """An estimation step failed (subsample too short, degenerate inputs)."""


class ConfigError(CipcaError):
    """A run configuration is invalid."""
