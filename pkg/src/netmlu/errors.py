"""Exception types shared across the toolkit."""


class ValidationError(ValueError):
    """Input violates a documented precondition or invariant."""


class ParseError(ValidationError):
    """Malformed topology file. Carries the 1-based line number when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConvergenceError(RuntimeError):
    """An iterative solver exhausted its iteration budget."""


class SamplingError(RuntimeError):
    """A rejection sampler exhausted its retry budget."""
