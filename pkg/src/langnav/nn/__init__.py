"""Minimal dense-tensor autodiff engine and the layers the grounder uses."""

from .tensor import (
    Tensor,
    ShapeError,
    concat,
    default_dtype,
    set_default_dtype,
    using_dtype,
)
from .layers import (
    Conv2d,
    Conv3d,
    Embedding,
    Linear,
    MultiHeadSelfAttention,
    upsample2x,
)
from .loss import LossConfig, combo_loss
from .optim import OptimizerState, adamw_step, poly_lr
from .gradcheck import grad_check
from .weights import WeightsError, assign_weights, load_weights, save_weights

__all__ = [
    "Tensor", "ShapeError", "concat", "default_dtype", "set_default_dtype",
    "using_dtype", "Conv2d", "Conv3d", "Embedding", "Linear",
    "MultiHeadSelfAttention", "upsample2x", "LossConfig", "combo_loss",
    "OptimizerState", "adamw_step", "poly_lr", "grad_check",
    "WeightsError", "assign_weights", "load_weights", "save_weights",
]
