"""Parameterized layers built on the functional ops."""

from dataclasses import dataclass, field

import numpy as np

from .ops import conv2d_forward, conv2d_backward, relu_forward, relu_backward


@dataclass
class LayerParams:
    """Weights and bias of one layer plus its optimizer treatment."""

    weights: np.ndarray
    bias: np.ndarray
    lr_multiplier: float = 1.0
    frozen: bool = False
    grad_weights: np.ndarray = field(default=None, repr=False)
    grad_bias: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.lr_multiplier < 0:
            raise ValueError("lr_multiplier must be non-negative")
        self.zero_grad()

    def zero_grad(self):
        self.grad_weights = np.zeros_like(self.weights)
        self.grad_bias = np.zeros_like(self.bias)


class Conv2d:
    """Convolution layer holding its LayerParams and last forward cache."""

    def __init__(self, in_channels, out_channels, kernel, stride=1, pad=0,
                 lr_multiplier=1.0, frozen=False, rng=None, init_std=None):
        if rng is None:
            w = np.zeros((out_channels, in_channels, kernel, kernel))
        else:
            if init_std is None:
                init_std = np.sqrt(2.0 / (in_channels * kernel * kernel))
            w = rng.normal(0.0, init_std, (out_channels, in_channels, kernel, kernel))
        self.params = LayerParams(w, np.zeros(out_channels), lr_multiplier, frozen)
        self.stride = stride
        self.pad = pad
        self._cache = None

    def forward(self, x, train=False):
        y, cache = conv2d_forward(x, self.params.weights, self.params.bias,
                                  self.stride, self.pad)
        self._cache = cache if train else None
        return y

    def backward(self, grad_y):
        if self._cache is None:
            raise RuntimeError("backward called without a training forward pass")
        grad_x, gw, gb = conv2d_backward(grad_y, self._cache)
        self.params.grad_weights += gw
        self.params.grad_bias += gb
        return grad_x


class TwoLayerConvHead:
    """Two 1x1 convolutions with a ReLU in between, mapping C -> 2 classes.

    Used both for the adaptive motion-score head (spatial input) and the
    candidate-weighting head (1x1 spatial input).
    """

    def __init__(self, in_channels, hidden, rng, init_std=0.01,
                 lr_multipliers=(1.0, 1.0)):
        self.conv1 = Conv2d(in_channels, hidden, 1, rng=rng, init_std=init_std,
                            lr_multiplier=lr_multipliers[0])
        self.conv2 = Conv2d(hidden, 2, 1, rng=rng, init_std=init_std,
                            lr_multiplier=lr_multipliers[1])
        self._relu_mask = None

    @property
    def param_list(self):
        return [self.conv1.params, self.conv2.params]

    def forward(self, x, train=False):
        h = self.conv1.forward(x, train=train)
        h, mask = relu_forward(h)
        self._relu_mask = mask if train else None
        return self.conv2.forward(h, train=train)

    def backward(self, grad_y):
        g = self.conv2.backward(grad_y)
        g = relu_backward(g, self._relu_mask)
        return self.conv1.backward(g)

    def zero_grad(self):
        for p in self.param_list:
            p.zero_grad()
