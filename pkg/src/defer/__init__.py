"""Pipelined model-parallel inference across networked compute nodes."""

__version__ = "0.1.0"

from .errors import DeferError

__all__ = ["DeferError", "__version__"]
