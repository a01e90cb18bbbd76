"""Exception hierarchy shared by every module."""


class NVSDepthError(Exception):
    """Base class for all package errors."""


class ConfigurationError(NVSDepthError, ValueError):
    """Inconsistent shapes, dimensions or configuration values."""


class DegenerateInputError(NVSDepthError, ValueError):
    """Input is well-formed but carries no usable data (e.g. empty valid mask)."""


class ContractError(NVSDepthError, RuntimeError):
    """A caller violated an operation's precondition."""


class IngestionError(NVSDepthError, OSError):
    """A file on disk is missing or malformed."""

    def __init__(self, path, message):
        self.path = str(path)
        super().__init__(f"{self.path}: {message}")


class NumericalError(NVSDepthError, ArithmeticError):
    """A non-finite value appeared during training or evaluation."""
