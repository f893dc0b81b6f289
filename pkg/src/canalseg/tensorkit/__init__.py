"""Small differentiable engine for 5-D (N, C, D, H, W) tensors."""
from .gradcheck import GradCheckReport, grad_check
from .layers import (
    BatchNorm,
    Conv3,
    ConvT3,
    Dense,
    GlobalAvgPool,
    MaxPool2,
    Module,
    Parameter,
    ReLU,
    Resize,
    Sequential,
    Sigmoid,
    conv_bn_relu,
)
from .ops import (
    OddDims,
    ShapeMismatch,
    batchnorm_backward,
    batchnorm_forward,
    conv3_backward,
    conv3_forward,
    conv_transpose3_backward,
    conv_transpose3_forward,
    dice_loss,
    maxpool2_backward,
    maxpool2_forward,
    relu,
    resize_backward,
    resize_forward,
    sigmoid,
)
from .optim import Adam, adam_step

__all__ = [
    "Adam",
    "BatchNorm",
    "Conv3",
    "ConvT3",
    "Dense",
    "GlobalAvgPool",
    "GradCheckReport",
    "MaxPool2",
    "Module",
    "OddDims",
    "Parameter",
    "ReLU",
    "Resize",
    "Sequential",
    "ShapeMismatch",
    "Sigmoid",
    "adam_step",
    "batchnorm_backward",
    "batchnorm_forward",
    "conv3_backward",
    "conv3_forward",
    "conv_bn_relu",
    "conv_transpose3_backward",
    "conv_transpose3_forward",
    "dice_loss",
    "grad_check",
    "maxpool2_backward",
    "maxpool2_forward",
    "relu",
    "resize_backward",
    "resize_forward",
    "sigmoid",
]
