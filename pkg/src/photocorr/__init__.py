"""Photon time-tag correlation toolkit.

Extract zero-delay third-order correlations from second-order measurements
taken at several detector dead times, and compare them with the micromaser
steady state.
"""

from .timetag import TimeTagStream, read_stream, stats, write_stream

__version__ = "0.1.0"

__all__ = ["TimeTagStream", "__version__", "read_stream", "stats", "write_stream"]
