"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: InputError -> 1 (I/O and file-format
problems), ModelError -> 2 (validation, configuration, and fitting problems).
"""


class DlgeeError(Exception):
    """Base class for all package errors."""


class InputError(DlgeeError):
    """Unreadable file, missing column, non-numeric cell, missing value."""


class ModelError(DlgeeError):
    """Invalid dataset/configuration or a fitting failure."""


class ConvergenceError(ModelError):
    """An iterative solver did not reach its tolerance.

    ``last_iterate`` carries the final parameter vector for diagnostics.
    """

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class SingularSystemError(ModelError):
    """A linear system inside a solver was singular."""


class ValidationError(ModelError):
    """A dataset failed validation; ``violations`` holds the full list."""

    def __init__(self, violations):
        self.violations = list(violations)
        codes = ", ".join(v.code for v in self.violations)
        super().__init__(f"dataset validation failed: {codes}")
