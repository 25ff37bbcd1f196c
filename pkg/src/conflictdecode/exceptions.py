"""Exception hierarchy shared by all subsystems."""


class ConflictDecodeError(Exception):
    """Base class for package errors."""


class ConfigurationError(ConflictDecodeError, ValueError):
    """Invalid configuration (bad sizes, unknown keys, out-of-range values)."""


class InputError(ConflictDecodeError, ValueError):
    """Invalid runtime input: token ids out of range, sequences too long, shape mismatch."""


class DivergenceError(ConflictDecodeError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step, loss):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss


class NumericError(ConflictDecodeError, ArithmeticError):
    """Non-finite values reached a numerical kernel."""


class InjectionError(ConflictDecodeError, ValueError):
    """No same-type replacement entity is available for conflict injection."""


class GenerationError(ConflictDecodeError, RuntimeError):
    """Dataset synthesis exhausted its retry budget."""
