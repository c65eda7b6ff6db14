"""Exception hierarchy shared across the toolkit.

CLI exit codes map onto these: input problems exit 2, numeric failures
exit 3, missing pack members exit 4.
"""


class QEError(Exception):
    """Base class for all toolkit errors."""


class InvalidInputError(QEError):
    """Malformed input: bad shapes, non-finite values, out-of-range params."""


class SingularMatrixError(QEError):
    """Cholesky factorization failed even after damping.

    ``pivot`` is the 0-based index of the first non-positive pivot.
    """

    def __init__(self, message: str, pivot: int):
        super().__init__(f"{message} (failing pivot index {pivot})")
        self.pivot = pivot


class NumericFailureError(QEError):
    """Non-finite values produced mid-pipeline (layer/stage in message)."""


class MissingMemberError(QEError):
    """An eval variant requires a pack member that is absent."""


class ConfigError(QEError):
    """Inconsistent run configuration (e.g. refinement with one expert)."""
