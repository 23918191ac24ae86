"""Reverse-mode autodiff engine, layers, optimizer, and checkpoints."""

from .autodiff import (
    Tensor,
    abs_val,
    add,
    concat,
    conv2d,
    conv3d,
    conv_transpose2d,
    conv_transpose3d,
    group_norm,
    l1_loss,
    leaky_relu,
    linear,
    mean,
    mse_loss,
    mul,
    pow_const,
    relu,
    reshape,
    silu,
    sub,
    sum_all,
    time_embedding,
)
from .layers import (
    ControlBranch3d,
    Conv2d,
    Conv3d,
    ConvTranspose2d,
    ConvTranspose3d,
    GroupNorm,
    Linear,
    Module,
    ResBlock3d,
    UNet3D,
    VoxelMLP,
    build_unet3d,
)
from .netio import load_net, load_state, save_net, save_state
from .optim import AdamState, adam_step

__all__ = [
    "Tensor", "abs_val", "add", "concat", "conv2d", "conv3d",
    "conv_transpose2d", "conv_transpose3d", "group_norm", "l1_loss",
    "leaky_relu", "linear", "mean", "mse_loss", "mul", "pow_const", "relu",
    "reshape", "silu", "sub", "sum_all", "time_embedding",
    "ControlBranch3d", "Conv2d", "Conv3d", "ConvTranspose2d",
    "ConvTranspose3d", "GroupNorm", "Linear", "Module", "ResBlock3d",
    "UNet3D", "VoxelMLP", "build_unet3d",
    "load_net", "load_state", "save_net", "save_state",
    "AdamState", "adam_step",
]
