"""Test-time training toolkit for recommendation under distribution shift."""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
