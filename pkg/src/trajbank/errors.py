"""Exception types shared across the toolkit.

``ValueError`` is used for programmatic contract violations (bad shapes,
bad arguments).  The classes below mark conditions the CLI maps to
distinct exit codes.
"""


class DataError(Exception):
    """A file or record is malformed or violates a format invariant."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NumericError(Exception):
    """A numeric computation produced a non-finite result."""
