"""Exception hierarchy shared by all modules.

The CLI maps these to exit codes: ConfigError -> 2, NumericalError and
CertificationError -> 3, AcceptanceFailure -> 1.
"""


class ScoreLabError(Exception):
    """Base class; carries an optional diagnostics mapping."""

    def __init__(self, message, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


class DomainError(ScoreLabError, ValueError):
    """An argument lies outside the domain of the operation."""


class ConfigError(ScoreLabError, ValueError):
    """A configuration or target violates a stated invariant."""


class NumericalError(ScoreLabError, ArithmeticError):
    """A computation produced a non-finite or otherwise unusable value."""


class CertificationError(ScoreLabError):
    """A constructed network failed its grid certification."""


class AcceptanceFailure(ScoreLabError):
    """An experiment ran but one of its acceptance checks failed."""
