"""Low cycle-rank approximation of third-order tensors by rotate-and-sketch."""

__version__ = "0.1.0"
