"""Conditional adversarial autoencoder for face age progression with gender and identity terms."""

from .exceptions import CAAEError
from .model import FaceAgingCAAE

__all__ = ["CAAEError", "FaceAgingCAAE"]
__version__ = "0.1.0"
