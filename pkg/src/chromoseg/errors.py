"""Exception hierarchy shared by every chromoseg module."""


class ChromosegError(Exception):
    """Base class for all errors raised by this package."""


class StructuralError(ChromosegError, ValueError):
    """Shapes, channel counts or label values do not fit the operation."""


class NumericalError(ChromosegError, ArithmeticError):
    """Non-finite values entered or were produced by a computation."""


class NumericalDivergenceError(NumericalError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, batch, loss):
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}")


class FormatError(ChromosegError, ValueError):
    """A file does not follow the expected binary layout."""


class ConfigError(ChromosegError, ValueError):
    """A configuration value is invalid or makes the task infeasible."""
