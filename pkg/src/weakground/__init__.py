"""Weakly supervised joint box/mask grounding on procedurally generated scenes."""

__version__ = "0.1.0"
