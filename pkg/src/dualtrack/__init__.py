"""Two-stream (appearance + optical flow) tracking-by-detection."""

from .core import BoundingBox, TrackerConfig, iou
from .tracker import TrackResult, init_tracker, run_sequence, track_frame

__all__ = ["BoundingBox", "TrackerConfig", "TrackResult", "init_tracker", "iou", "run_sequence",
           "track_frame"]
__version__ = "0.1.0"
