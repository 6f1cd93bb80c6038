"""Encoder-decoder lesion segmentation built from scratch: a tape-based
autodiff tensor core (compiled patch kernels with a numpy fallback),
cross-level feature fusion, multi-rate dilated pyramid pooling, a
ConvLSTM decoder, Dice training and mask evaluation metrics.
"""

from .kernels import BACKEND as KERNEL_BACKEND
from .model import CrossLevelContextNet, ModelConfig, instantiate_ablation
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "CrossLevelContextNet",
    "ModelConfig",
    "Tensor",
    "instantiate_ablation",
    "KERNEL_BACKEND",
    "__version__",
]
