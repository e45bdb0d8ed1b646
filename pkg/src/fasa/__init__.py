"""Foreground-aware slot attention: two-stage object-centric scene decomposition on patch features."""

from .autodiff import Tape, Tensor, backward
from .errors import DimensionError, FasaError, GradientError, InputError, NumericError, ParseError
from .maskcut import maskcut_extract, ncut_bipartition
from .matching import hungarian_match, iou
from .slots import BinaryMask, SlotAttention, SlotConfig

__version__ = "0.1.0"

__all__ = [
    "BinaryMask", "DimensionError", "FasaError", "GradientError", "InputError", "NumericError", "ParseError",
    "SlotAttention", "SlotConfig", "Tape", "Tensor", "backward", "hungarian_match", "iou", "maskcut_extract",
    "ncut_bipartition",
]
