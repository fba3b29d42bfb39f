"""DP mixture clustering coupled to a variational auto-encoder, in numpy."""

__version__ = "0.1.0"
