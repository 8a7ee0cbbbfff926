"""Minimal dense-array neural network kernel with hand-written backward passes."""

from .ops import (
    ShapeError,
    NormalizationError,
    conv2d,
    conv2d_forward,
    conv2d_backward,
    relu,
    relu_forward,
    relu_backward,
    max_pool2d,
    max_pool2d_forward,
    max_pool2d_backward,
    lrn,
    lrn_forward,
    lrn_backward,
    l2_normalize,
    l2_normalize_forward,
    l2_normalize_backward,
    weighted_softmax_loss,
    contrastive_loss,
)
from .roipool import roi_pool, roi_pool_batch, roi_pool_backward, roi_bin_bounds
from .layers import LayerParams, Conv2d, TwoLayerConvHead
from .optim import SgdState, sgd_step
from .gradcheck import finite_diff_grad
from .checkpoint import save_checkpoint, load_checkpoint, CheckpointError

__all__ = [
    "ShapeError",
    "NormalizationError",
    "conv2d",
    "conv2d_forward",
    "conv2d_backward",
    "relu",
    "relu_forward",
    "relu_backward",
    "max_pool2d",
    "max_pool2d_forward",
    "max_pool2d_backward",
    "lrn",
    "lrn_forward",
    "lrn_backward",
    "l2_normalize",
    "l2_normalize_forward",
    "l2_normalize_backward",
    "weighted_softmax_loss",
    "contrastive_loss",
    "roi_pool",
    "roi_pool_batch",
    "roi_pool_backward",
    "roi_bin_bounds",
    "LayerParams",
    "Conv2d",
    "TwoLayerConvHead",
    "SgdState",
    "sgd_step",
    "finite_diff_grad",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]
