"""Desk-scale controllable diffusion on synthetic phantom radiographs.

The package trains a small denoising diffusion backbone on procedurally
generated phantom images, then steers it with two trainable-copy control
adapters: one fed a stack of texture/edge/segmentation filter maps, one fed a
gaze-derived attention control. Everything runs on a CPU with numpy.
"""

__version__ = "0.1.0"

from .autodiff import Tensor, backward, no_grad
from .unet import NetworkSpec, UNet

__all__ = ["Tensor", "backward", "no_grad", "NetworkSpec", "UNet", "__version__"]
