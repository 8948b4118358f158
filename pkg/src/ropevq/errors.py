"""Exception types raised by the quantizers and the cache."""


class TrainingError(RuntimeError):
    """Training could not proceed; ``diagnostics`` carries the details."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class CorruptCodeError(ValueError):
    """Stored codes are out of range or truncated."""
