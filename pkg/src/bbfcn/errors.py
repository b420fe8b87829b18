"""Exception types shared across the package."""


class BBFCNError(Exception):
    """Base class for all package errors."""


class ContractError(BBFCNError, ValueError):
    """An operation was called with arguments that violate its contract."""


class NumericError(BBFCNError, FloatingPointError):
    """Non-finite values encountered."""


class DivergenceError(NumericError):
    """Training loss became non-finite or exceeded the divergence guard."""


class FormatError(BBFCNError, ValueError):
    """Malformed weight file or image container."""


class IncompatibleModelError(BBFCNError, ValueError):
    """Weight file is well-formed but does not match the architecture."""


class ParseError(BBFCNError, ValueError):
    """Malformed annotation file."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DataError(BBFCNError, ValueError):
    """Dataset cannot satisfy a sampling request."""


class EvaluationError(BBFCNError, ValueError):
    """Ground truth or detections are insufficient for the requested metric."""
