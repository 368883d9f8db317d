"""Weakly supervised tissue segmentation with text-initialised prototypes and structural distillation."""

from .data import BACKGROUND, CLASS_NAMES, IMAGE_SIZE, NUM_CLASSES

__version__ = "0.1.0"

__all__ = ["BACKGROUND", "CLASS_NAMES", "IMAGE_SIZE", "NUM_CLASSES", "__version__"]
