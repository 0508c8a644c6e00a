"""Motion and object continuity training for grid object detectors."""
from .core import BoundingBox, DetectedObject, Frame, FrameSequence, GridState, ZWhere

__all__ = ["BoundingBox", "DetectedObject", "Frame", "FrameSequence", "GridState", "ZWhere"]
__version__ = "0.1.0"
