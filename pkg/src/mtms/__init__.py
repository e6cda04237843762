"""Meta/mesa hypernetwork models, their linear special case, and the M6-style tooling around them."""

__version__ = "0.1.0"
