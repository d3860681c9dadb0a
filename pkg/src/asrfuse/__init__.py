"""Desk-scale acoustic-fusion toolkit for generative ASR error correction."""

__version__ = "0.1.0"

from .tensor import Tensor, no_grad  # noqa: F401
