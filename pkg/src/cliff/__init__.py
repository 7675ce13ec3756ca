"""Cliff: disentanglement by aligning density discontinuities with the axes."""

from .criterion import CliffLossReport, CliffWeights, total_loss
from .density import KernelConfig
from .diffgraph import Tensor, backward, grad_check

__all__ = ["CliffLossReport", "CliffWeights", "KernelConfig", "Tensor", "backward", "grad_check", "total_loss"]
__version__ = "0.1.0"
