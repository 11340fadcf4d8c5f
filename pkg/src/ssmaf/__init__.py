"""Dual-stream exudate segmentation with a super-resolution auxiliary stream."""

__version__ = "0.1.0"
