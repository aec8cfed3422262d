"""Test-time adaptation by deep subspace alignment on frozen embeddings."""

__version__ = "0.1.0"

from .errors import FormatError, NoStableDimension, NumericalError

__all__ = ["FormatError", "NoStableDimension", "NumericalError", "__version__"]
