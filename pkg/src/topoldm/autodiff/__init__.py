"""Small reverse-mode autodiff library on numpy arrays."""
from . import tensor as ops
from .checkpoint import load_checkpoint, save_checkpoint
from .nn import Conv2d, GroupNorm, Linear, Module, seeded_init
from .optim import ParamStore, adamw_step
from .tensor import Tensor, default_dtype, get_default_dtype, no_grad, set_default_dtype

__all__ = [
    "Tensor", "ops", "Module", "Linear", "Conv2d", "GroupNorm", "seeded_init",
    "ParamStore", "adamw_step", "save_checkpoint", "load_checkpoint",
    "default_dtype", "get_default_dtype", "set_default_dtype", "no_grad",
]
