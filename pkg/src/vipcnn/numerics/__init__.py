"""Dense tensors with reverse-mode autodiff and the layers the detector needs."""
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import grad_check
from .layers import (LayerParams, conv2d, conv2d_forward, fc_forward, linear, log_softmax_np, max_pool2d,
                     relu, roi_pool, select_class_offsets, smooth_l1, softmax_cross_entropy, softmax_np)
from .optim import SGD, sgd_step
from .tensor import Parameter, Tensor, concat, default_dtype, mean, no_grad, precision, total

__all__ = [
    "LayerParams", "Parameter", "SGD", "Tensor", "concat", "conv2d", "conv2d_forward", "default_dtype",
    "fc_forward", "grad_check", "linear", "load_checkpoint", "log_softmax_np", "max_pool2d", "mean",
    "no_grad", "precision", "relu", "roi_pool", "save_checkpoint", "select_class_offsets", "sgd_step",
    "smooth_l1", "softmax_cross_entropy", "softmax_np", "total",
]
