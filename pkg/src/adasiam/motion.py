"""Motion estimation: frozen feature stage, adaptive score head, labels,
and back-projection of the score-map peak to image coordinates.

The feature stage (one strided conv + ReLU + cross-channel normalization)
is pretrained on the synthetic corpus and then frozen; only the two-layer
1x1 head adapts online. The head scores every cell of a 51x51 map over a
search window four times the target size, and the positive-channel argmax
becomes an extra sampling center for the candidate generator.
"""

from dataclasses import dataclass, field

import numpy as np

from .geometry import Box, cosine_window, extract_patch
from .nnet.layers import LayerParams, TwoLayerConvHead
from .nnet.ops import (
    ShapeError,
    conv2d_forward,
    conv2d_backward,
    relu_forward,
    relu_backward,
    lrn_forward,
    lrn_backward,
    weighted_softmax_loss,
)
from .nnet.optim import SgdState


@dataclass
class LrnConfig:
    depth_radius: int = 2
    alpha: float = 1e-4
    beta: float = 0.75
    k: float = 2.0


@dataclass
class MotionConfig:
    """Search-window geometry and network sizes.

    The shape chain (patch - kernel)/stride + 1 must land exactly on the
    score-map size; violating configs are rejected at startup.
    """

    patch_size: int = 107
    kernel: int = 7
    stride: int = 2
    channels: int = 16
    hidden: int = 8
    map_size: int = 51
    radius: int = 12
    window_factor: float = 4.0
    head_lr: float = 1e-3
    head_momentum: float = 0.9
    head_weight_decay: float = 5e-4
    head_batch: int = 8
    head_lr_multipliers: tuple = (3.0, 30.0)
    lrn: LrnConfig = field(default_factory=LrnConfig)

    def __post_init__(self):
        got = (self.patch_size - self.kernel) // self.stride + 1
        if got != self.map_size or (self.patch_size - self.kernel) % self.stride:
            raise ValueError(
                f"feature stage maps {self.patch_size} -> {got}, expected "
                f"{self.map_size}; adjust patch_size/kernel/stride")
        if self.radius >= self.map_size / 2:
            raise ValueError("radius must be smaller than half the map size")


class MotionFeatureNet:
    """Frozen feature stage: strided conv, ReLU, cross-channel LRN."""

    def __init__(self, cfg, rng=None):
        self.cfg = cfg
        if rng is None:
            w = np.zeros((cfg.channels, 3, cfg.kernel, cfg.kernel))
        else:
            std = np.sqrt(2.0 / (3 * cfg.kernel * cfg.kernel))
            w = rng.normal(0.0, std, (cfg.channels, 3, cfg.kernel, cfg.kernel))
        self.params = LayerParams(w, np.zeros(cfg.channels), frozen=True)

    def named_params(self):
        return {"fmen.conv.weights": self.params.weights,
                "fmen.conv.bias": self.params.bias}

    def load_named(self, arrays):
        for name, arr in self.named_params().items():
            if name not in arrays:
                raise KeyError(f"checkpoint missing parameter {name}")
            if arrays[name].shape != arr.shape:
                raise ValueError(
                    f"checkpoint shape mismatch for {name}: "
                    f"{arrays[name].shape} vs {arr.shape}")
            arr[...] = arrays[name]

    def forward(self, patch, train=False):
        """patch: (3, patch_size, patch_size) -> (channels, map, map).

        Returns features, or (features, caches) when train=True.
        """
        cfg = self.cfg
        x = np.asarray(patch, dtype=np.float64)
        if x.shape != (3, cfg.patch_size, cfg.patch_size):
            raise ShapeError(
                f"feature stage expects (3,{cfg.patch_size},{cfg.patch_size}), "
                f"got {x.shape}")
        y, ccache = conv2d_forward(x[None], self.params.weights, self.params.bias,
                                   stride=cfg.stride)
        y, mask = relu_forward(y)
        y, lcache = lrn_forward(y, cfg.lrn.depth_radius, cfg.lrn.alpha,
                                cfg.lrn.beta, cfg.lrn.k)
        if train:
            return y[0], (ccache, mask, lcache)
        return y[0]

    def backward(self, grad_y, caches):
        """Gradient through LRN and ReLU into the conv parameters.

        Used only by pretraining; tracking never updates this stage.
        """
        ccache, mask, lcache = caches
        g = lrn_backward(grad_y[None] if grad_y.ndim == 3 else grad_y, lcache)
        g = relu_backward(g, mask)
        _, gw, gb = conv2d_backward(g, ccache)
        return gw, gb


def new_score_head(cfg, rng, init_std=0.01):
    """Adaptive two-layer 1x1 head producing 2-channel logits."""
    return TwoLayerConvHead(cfg.channels, cfg.hidden, rng, init_std=init_std,
                            lr_multipliers=cfg.head_lr_multipliers)


def score_map(head, features):
    """Windowed features (C, m, m) or (N, C, m, m) -> logits (..., 2, m, m)."""
    x = np.asarray(features, dtype=np.float64)
    single = x.ndim == 3
    logits = head.forward(x[None] if single else x, train=False)
    return logits[0] if single else logits


def make_score_labels(cfg):
    """Label grid and class weights for score-map training.

    Cells within radius of the map center are the positive class (label
    2), the rest negative (label 1). Per-class weights are inversely
    proportional to the class cell counts and normalized so the mean
    weight over cells is 1, which removes class imbalance from the loss.

    Returns (labels (m, m) int with values {1, 2}, class_weights (2,)).
    """
    m = cfg.map_size
    center = (m - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
    dist = np.sqrt((rr - center) ** 2 + (cc - center) ** 2)
    labels = np.where(dist <= cfg.radius, 2, 1).astype(np.int64)
    n_pos = int((labels == 2).sum())
    n_neg = labels.size - n_pos
    total = labels.size
    weights = np.array([total / (2.0 * n_neg), total / (2.0 * n_pos)])
    return labels, weights


def _labels_to_classes(labels):
    return labels.reshape(-1) - 1


def train_score_head(head, features, labels, class_weights, epochs, cfg,
                     rng_seed=0):
    """Fit the adaptive head on windowed feature maps.

    features: (N, C, m, m) already multiplied by the cosine window. Each
    epoch draws one minibatch (head_batch maps, with replacement) and
    takes one SGD step on the class-weighted softmax loss over all grid
    cells. Returns the per-epoch loss list.
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim == 3:
        feats = feats[None]
    rng = np.random.default_rng(rng_seed)
    sgd = SgdState(head.param_list, cfg.head_lr, cfg.head_momentum,
                   cfg.head_weight_decay, batch_size=cfg.head_batch)
    classes = _labels_to_classes(labels)
    losses = []
    for epoch in range(epochs):
        pick = rng.integers(0, feats.shape[0], size=cfg.head_batch)
        batch = feats[pick]
        logits = head.forward(batch, train=True)
        n, _, mh, mw = logits.shape
        flat = logits.transpose(1, 0, 2, 3).reshape(2, n * mh * mw)
        rep = np.tile(classes, n)
        loss, grad = weighted_softmax_loss(flat, rep, class_weights)
        if not np.isfinite(loss):
            raise FloatingPointError(
                f"score-head training diverged at epoch {epoch} (loss={loss})")
        losses.append(loss)
        head.zero_grad()
        head.backward(grad.reshape(2, n, mh, mw).transpose(1, 0, 2, 3))
        sgd.step()
    return losses


def make_search_window(state, factor):
    """Square window centered on the state, factor times the geometric
    mean of the box size per side."""
    box = state.box
    side = factor * np.sqrt(box.w * box.h)
    return Box(state.l_x - side / 2.0, state.l_y - side / 2.0, side, side)


def extract_search_features(fnet, image, window, coswin=None):
    """Crop the window, resize to the net input, and window the features."""
    cfg = fnet.cfg
    patch = extract_patch(image, window, (cfg.patch_size, cfg.patch_size))
    feats = fnet.forward(patch)
    if coswin is None:
        coswin = cosine_window(cfg.map_size, cfg.map_size)
    return feats * coswin[None]


def backproject_argmax(positive_map, window):
    """Map the score-map peak back to image coordinates.

    The peak cell (first in row-major order on ties) maps to its cell
    center under the linear window-to-map correspondence.
    """
    m = positive_map.shape[0]
    flat = int(np.argmax(positive_map))
    r, c = divmod(flat, positive_map.shape[1])
    x = window.x + (c + 0.5) / m * window.w
    y = window.y + (r + 0.5) / positive_map.shape[0] * window.h
    return x, y


def pretrain_feature_net(fnet, corpus, epochs, rng_seed, cfg=None,
                         windows_per_sequence=6, lr=1e-3, momentum=0.9,
                         weight_decay=5e-4):
    """Train the feature stage on synthetic sequences, then freeze it.

    A throwaway two-layer head classifies foreground cells over windows
    whose centers are jittered around the ground truth, so the conv learns
    target-vs-background texture; the head is discarded afterwards.
    Returns the per-epoch loss list.
    """
    cfg = cfg or fnet.cfg
    rng = np.random.default_rng(rng_seed)
    coswin = cosine_window(cfg.map_size, cfg.map_size)
    center = (cfg.map_size - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(cfg.map_size), np.arange(cfg.map_size),
                         indexing="ij")

    samples = []
    for frames, gts in corpus:
        for _ in range(windows_per_sequence):
            fi = int(rng.integers(0, len(frames)))
            gt = gts[fi]
            gcx, gcy = gt.center
            side = cfg.window_factor * np.sqrt(gt.w * gt.h)
            jitter = rng.normal(0.0, 0.12 * side, size=2)
            win = Box(gcx + jitter[0] - side / 2.0,
                      gcy + jitter[1] - side / 2.0, side, side)
            patch = extract_patch(frames[fi], win, (cfg.patch_size, cfg.patch_size))
            # target center expressed on the score-map grid of this window
            mr = (gcy - win.y) / win.h * cfg.map_size - 0.5
            mc = (gcx - win.x) / win.w * cfg.map_size - 0.5
            dist = np.sqrt((rr - mr) ** 2 + (cc - mc) ** 2)
            labels = np.where(dist <= cfg.radius, 2, 1).astype(np.int64)
            if (labels == 2).sum() == 0 or (labels == 1).sum() == 0:
                continue
            samples.append((patch, labels))
    if not samples:
        raise ValueError("pretraining corpus produced no usable windows")

    head = new_score_head(cfg, rng)
    fnet.params.frozen = False
    params = [fnet.params] + head.param_list
    sgd = SgdState(params, lr, momentum, weight_decay)
    losses = []
    total_cells = cfg.map_size * cfg.map_size
    for epoch in range(epochs):
        order = rng.permutation(len(samples))
        epoch_loss = 0.0
        for si in order:
            patch, labels = samples[si]
            feats, caches = fnet.forward(patch, train=True)
            windowed = (feats * coswin[None])[None]
            logits = head.forward(windowed, train=True)
            flat = logits.transpose(1, 0, 2, 3).reshape(2, total_cells)
            classes = _labels_to_classes(labels)
            n_pos = max(1, int((classes == 1).sum()))
            n_neg = max(1, total_cells - n_pos)
            w = np.array([total_cells / (2.0 * n_neg), total_cells / (2.0 * n_pos)])
            loss, grad = weighted_softmax_loss(flat, classes, w)
            if not np.isfinite(loss):
                raise FloatingPointError("feature-stage pretraining diverged")
            epoch_loss += loss
            fnet.params.zero_grad()
            head.zero_grad()
            gfeat = head.backward(grad.reshape(2, 1, cfg.map_size, cfg.map_size)
                                  .transpose(1, 0, 2, 3))
            gfeat = gfeat * coswin[None]
            gw, gb = fnet.backward(gfeat, caches)
            fnet.params.grad_weights += gw
            fnet.params.grad_bias += gb
            sgd.step()
        losses.append(epoch_loss / len(samples))
    fnet.params.frozen = True
    return losses
