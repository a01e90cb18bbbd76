"""Joint monocular depth and novel-view synthesis training on a small numpy autodiff engine."""

from .errors import (
    ConfigurationError,
    ContractError,
    DegenerateInputError,
    IngestionError,
    NumericalError,
    NVSDepthError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError", "ContractError", "DegenerateInputError", "IngestionError",
    "NVSDepthError", "NumericalError", "__version__",
]
