"""Shared exception types.

The CLI maps these onto process exit codes: validation problems in input
data are code 2, runtime failures (shape errors, divergence) are code 3.
"""


class LyricmoodError(Exception):
    """Base class for all library errors."""


class ValidationError(LyricmoodError, ValueError):
    """Input data violates a documented invariant.

    ``line`` carries the 1-based line number when the error originates from
    parsing a text stream.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class FormatError(LyricmoodError, ValueError):
    """A binary or text container is malformed or uses an unsupported codec."""


class ShapeError(LyricmoodError, ValueError):
    """Tensor operands do not conform; message names both shapes."""


class DivergenceError(LyricmoodError, RuntimeError):
    """Training produced a non-finite loss."""
