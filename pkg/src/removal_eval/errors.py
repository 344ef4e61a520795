"""Exception hierarchy shared by all removal_eval modules.

The CLI maps these onto its exit-code contract: validation and per-item
data problems exit 1, file-format / parse / environment problems exit 2,
protocol violations exit 3, and flag-usage mistakes exit 64.
"""


class RemovalEvalError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(RemovalEvalError, ValueError):
    """An input violates a documented precondition or invariant."""


class DegenerateInputError(ValidationError):
    """Input is well-formed but statistically unusable (e.g. a single sample)."""


class NotPsdError(ValidationError):
    """A matrix required to be positive semi-definite is not, beyond tolerance."""

    def __init__(self, message: str, eigenvalue: float):
        super().__init__(message)
        self.eigenvalue = eigenvalue


class NumericalError(RemovalEvalError, ArithmeticError):
    """A computation failed numerically after all documented fallbacks."""


class FormatError(RemovalEvalError, ValueError):
    """A file or document does not match its declared byte/JSON layout."""

    def __init__(self, message: str, offset: int | None = None, path: str | None = None):
        detail = message
        if offset is not None:
            detail += f" (byte offset {offset})"
        if path is not None:
            detail += f" [{path}]"
        super().__init__(detail)
        self.offset = offset
        self.path = path


class ParseError(FormatError):
    """An annotation document is missing or mistypes a required field.

    ``json_path`` locates the offending element, e.g. ``$.images[3].width``.
    """

    def __init__(self, message: str, json_path: str):
        super().__init__(f"{message} at {json_path}")
        self.json_path = json_path


class ProtocolError(RemovalEvalError, RuntimeError):
    """The evaluation protocol was violated (e.g. a starred metric requested
    against a comparison set that admits target-class objects)."""


class BackendError(RemovalEvalError, RuntimeError):
    """A feature-extractor backend failed to load or run."""


class GenerationError(RemovalEvalError, RuntimeError):
    """Synthetic scene generation could not satisfy its constraints."""
