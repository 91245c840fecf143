"""Spatial co-expression modules from penalized spatial regression and iterative clustering."""

__version__ = "0.1.0"

from .errors import InputError, LimitError, NumericalError, StihcError, StihcWarning  # noqa: F401
