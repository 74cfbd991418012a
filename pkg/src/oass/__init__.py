"""Object-aware self-supervision (OASS) and class-specific instances for multi-label images."""
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
