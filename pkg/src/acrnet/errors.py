"""Exception hierarchy shared by all acrnet modules.

Each class carries a short ``category`` string; the CLI prints it as the
prefix of its one-line error message.
"""


class AcrnetError(Exception):
    category = "error"


class ConfigurationError(AcrnetError, ValueError):
    category = "config"


class ShapeError(AcrnetError, ValueError):
    category = "shape"


class DataError(AcrnetError, ValueError):
    category = "data"


class FormatError(AcrnetError):
    """Bad magic bytes or otherwise unrecognisable file/payload."""

    category = "format"


class VersionError(FormatError):
    category = "version"


class TruncatedError(FormatError):
    category = "truncated"


class BitCountError(FormatError):
    category = "bitcount"


class TrainingError(AcrnetError, RuntimeError):
    category = "training"


class InfeasibleError(AcrnetError):
    """No deployment plan satisfies the budget.

    ``binding`` lists the constraints violated by every candidate, or is None
    when candidates fail for different reasons; ``details`` maps each
    candidate to the constraints it violates.
    """

    category = "infeasible"

    def __init__(self, message, binding=None, details=None):
        super().__init__(message)
        self.binding = binding
        self.details = details or {}
