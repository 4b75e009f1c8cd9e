"""Cascade transformer dose prediction on a numpy autodiff core.

A ViT-encoder segmentation network feeds predicted organ masks to a two-stage
dose network (coarse U-Net, then a ViT encoder with a deep-supervised pyramid
decoder). Everything runs on CPU at desk scale.
"""
from .tensor import ConfigError, DimensionError, NumericalError, Tensor, no_grad

__version__ = "0.1.0"

__all__ = ["ConfigError", "DimensionError", "NumericalError", "Tensor", "no_grad", "__version__"]
