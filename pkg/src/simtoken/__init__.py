"""Desk-scale referring audio-visual segmentation with a single semantic <SEG> token."""

__version__ = "0.1.0"
