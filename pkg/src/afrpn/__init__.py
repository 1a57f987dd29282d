"""Anchor-free region proposals and two-stage detection of multi-oriented text, in numpy."""

__version__ = "0.1.0"
