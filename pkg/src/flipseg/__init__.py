"""Box-supervised nodule segmentation by multi-agent superpixel erasing.

Agents walk the superpixels of an annotation box and erase them with
surrounding tissue until a nodule/normal classifier flips its decision; the
erased region is the segmentation.
"""
from .errors import BoundsError, ConfigError, DataError, FlipsegError, FormatError, NumericError, StateError
from .grid import BoundingBox

__version__ = "0.1.0"

__all__ = ["BoundingBox", "BoundsError", "ConfigError", "DataError", "FlipsegError", "FormatError",
           "NumericError", "StateError", "__version__"]
