"""Desk-scale image decoding from synthetic BOLD fMRI windows."""

__version__ = "0.1.0"
