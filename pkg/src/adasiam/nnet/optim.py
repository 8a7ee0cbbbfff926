"""SGD with momentum, weight decay, and per-layer learning-rate scaling."""

import numpy as np


class SgdState:
    """Velocity buffers plus the shared hyperparameters of one optimizer."""

    def __init__(self, param_list, global_lr, momentum=0.9, weight_decay=0.0,
                 batch_size=1):
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if weight_decay < 0.0:
            raise ValueError("weight_decay must be non-negative")
        self.params = list(param_list)
        self.global_lr = global_lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.velocity = [(np.zeros_like(p.weights), np.zeros_like(p.bias))
                         for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        sgd_step(self.params, None, self)


def sgd_step(params, grads, state):
    """v <- mom*v - lr*lr_mult*(grad + wd*w); w <- w + v. Frozen params untouched.

    grads may be None, in which case each LayerParams' accumulated
    grad_weights/grad_bias are used.
    """
    for i, p in enumerate(state.params if params is None else params):
        if p.frozen:
            continue
        gw = p.grad_weights if grads is None else grads[i][0]
        gb = p.grad_bias if grads is None else grads[i][1]
        vw, vb = state.velocity[i]
        lr = state.global_lr * p.lr_multiplier
        vw *= state.momentum
        vw -= lr * (gw + state.weight_decay * p.weights)
        vb *= state.momentum
        vb -= lr * (gb + state.weight_decay * p.bias)
        p.weights += vw
        p.bias += vb
