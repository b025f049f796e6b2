"""Learned update gating for long-term visual tracking, with a simulated tracker stack."""

from .core import BoundingBox, CueVector, FrameDims, TimeSliceWindow, iou, normalize_box
from .metaupdater import MetaUpdaterConfig, MetaUpdaterModel, TrainConfig, decide, load, save

__all__ = ["BoundingBox", "CueVector", "FrameDims", "TimeSliceWindow", "iou", "normalize_box",
           "MetaUpdaterConfig", "MetaUpdaterModel", "TrainConfig", "decide", "load", "save"]
__version__ = "0.1.0"
