"""TriHorn-Net style 3D hand pose estimation from depth crops."""

from .kernels import BACKEND as KERNEL_BACKEND
from .tensor import Tensor, no_grad

__all__ = ["Tensor", "no_grad", "KERNEL_BACKEND"]
__version__ = "0.1.0"
