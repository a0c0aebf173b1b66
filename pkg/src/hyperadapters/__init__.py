"""Adapters, hypernetworks, and a small seq2seq stack for studying
instance-conditioned decoder adaptation."""

from ._kernels import backend_name
from .tensor import Tape, Tensor, backward

__version__ = "0.1.0"

__all__ = ["Tensor", "Tape", "backward", "backend_name", "__version__"]
