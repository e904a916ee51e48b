"""Residual Dense Swin Transformer super-resolution with segmentation-driven perceptual losses."""

from .model import RdstConfig, RdstModel, rdst_cost, rdst_forward
from .tensor import Tensor, backward, no_grad

__all__ = ["RdstConfig", "RdstModel", "Tensor", "backward", "no_grad", "rdst_cost", "rdst_forward"]
__version__ = "0.1.0"
