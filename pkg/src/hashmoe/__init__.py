"""Mixture of heterogeneous hash-grid experts for large-scene radiance fields."""

from hashmoe._backend import NAME as backend

__version__ = "0.1.0"

__all__ = ["backend", "__version__"]
