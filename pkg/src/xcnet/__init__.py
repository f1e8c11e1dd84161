"""xcnet: multi-task CNN toolkit for detection + segmentation on synthetic scenes."""

__version__ = "0.1.0"
