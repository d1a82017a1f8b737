"""Two-branch multi-resolution video re-identification toolkit."""

from .tensor import ConfigError, InputError, Parameter, Tensor, UsageError

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "InputError",
    "Parameter",
    "Tensor",
    "UsageError",
    "__version__",
]
