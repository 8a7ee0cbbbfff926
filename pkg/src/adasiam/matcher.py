"""Siamese matching branch, template buffer, and offline pair training.

One branch runs a VGG-style conv stack over the whole frame, taps the two
deepest feature maps through max ROI pooling for every candidate box, and
produces a unit-norm embedding per candidate: the flattened pools of both
taps plus a 7x7-conv fc projection, each l2-normalized, concatenated, and
normalized again. Similarity between candidates is the plain inner
product, optionally blended with a bounded buffer of past best templates.
"""

import logging
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .geometry import Box, iou, sample_candidates, SamplerConfig, BoxState
from .nnet.layers import LayerParams
from .nnet.ops import (
    L2_EPS,
    NormalizationError,
    conv2d_forward,
    conv2d_backward,
    relu_forward,
    relu_backward,
    max_pool2d_forward,
    max_pool2d_backward,
    l2_normalize_forward,
    l2_normalize_backward,
    contrastive_loss_batch,
)
from .nnet.roipool import roi_pool_batch, roi_pool_backward_batch
from .nnet.optim import SgdState

log = logging.getLogger(__name__)


@dataclass
class MatcherConfig:
    """Topology of one branch; desk-scale defaults (full scale: 512 input,
    channels (64,128,256,512,512), fc 4096)."""

    input_size: int = 128
    channels: tuple = (8, 16, 32, 64, 64)
    sublayers: tuple = (2, 2, 3, 3, 3)
    fc_dim: int = 512
    roi_bins: int = 7
    margin: float = 1.0
    fc_lr_multiplier: float = 100.0

    # two pool stages before the roi taps
    @property
    def spatial_scale(self):
        return 0.25

    @property
    def embed_dim(self):
        b2 = self.roi_bins * self.roi_bins
        return b2 * self.channels[3] + b2 * self.channels[4] + self.fc_dim

    def __post_init__(self):
        if len(self.channels) != 5 or len(self.sublayers) != 5:
            raise ValueError("expected five conv blocks")
        if self.input_size % 4 != 0:
            raise ValueError("input_size must be divisible by 4 (two pool stages)")


class SiameseBranch:
    """Weight-shared matching branch F(.)."""

    def __init__(self, cfg, rng=None):
        self.cfg = cfg
        self.conv_params = []
        self.block_index = []
        cin = 3
        for bi, (cout, n_sub) in enumerate(zip(cfg.channels, cfg.sublayers)):
            for _ in range(n_sub):
                if rng is None:
                    w = np.zeros((cout, cin, 3, 3))
                else:
                    std = np.sqrt(2.0 / (cin * 9))
                    w = rng.normal(0.0, std, (cout, cin, 3, 3))
                self.conv_params.append(
                    LayerParams(w, np.zeros(cout), frozen=(bi == 0)))
                self.block_index.append(bi)
                cin = cout
        k = cfg.roi_bins
        if rng is None:
            wfc = np.zeros((cfg.fc_dim, cfg.channels[4], k, k))
        else:
            std = np.sqrt(2.0 / (cfg.channels[4] * k * k))
            wfc = rng.normal(0.0, std, (cfg.fc_dim, cfg.channels[4], k, k))
        self.fc_params = LayerParams(wfc, np.zeros(cfg.fc_dim),
                                     lr_multiplier=cfg.fc_lr_multiplier)

    # ------------------------------------------------------------ params

    @property
    def param_list(self):
        return self.conv_params + [self.fc_params]

    def named_params(self):
        out = {}
        for i, p in enumerate(self.conv_params):
            out[f"siamese.conv{i}.weights"] = p.weights
            out[f"siamese.conv{i}.bias"] = p.bias
        out["siamese.fc.weights"] = self.fc_params.weights
        out["siamese.fc.bias"] = self.fc_params.bias
        return out

    def load_named(self, arrays):
        for name, arr in self.named_params().items():
            if name not in arrays:
                raise KeyError(f"checkpoint missing parameter {name}")
            if arrays[name].shape != arr.shape:
                raise ValueError(
                    f"checkpoint shape mismatch for {name}: "
                    f"{arrays[name].shape} vs {arr.shape}")
            arr[...] = arrays[name]

    def zero_grad(self):
        for p in self.param_list:
            p.zero_grad()

    # ----------------------------------------------------------- forward

    def forward_image(self, image, train=False):
        """Run the conv stack over one CHW image.

        Returns an activation dict with the two roi tap maps ("conv4",
        "conv5") and, when train=True, the caches needed by
        backward_image.
        """
        x = np.asarray(image, dtype=np.float64)[None]
        conv_caches = []
        relu_masks = []
        pool_caches = []
        li = 0
        tap4 = tap5 = None
        for bi in range(5):
            for _ in range(self.cfg.sublayers[bi]):
                p = self.conv_params[li]
                x, cache = conv2d_forward(x, p.weights, p.bias, stride=1, pad=1)
                x, mask = relu_forward(x)
                conv_caches.append(cache if train else None)
                relu_masks.append(mask if train else None)
                li += 1
            if bi < 2:
                x, pcache = max_pool2d_forward(x)
                pool_caches.append(pcache if train else None)
            if bi == 3:
                tap4 = x
            elif bi == 4:
                tap5 = x
        return {
            "conv4": tap4[0],
            "conv5": tap5[0],
            "train": train,
            "conv_caches": conv_caches,
            "relu_masks": relu_masks,
            "pool_caches": pool_caches,
        }

    def embed_rois(self, acts, rois, train=False, threads=1, strict=True):
        """Embed candidate boxes off precomputed activations.

        rois: list of Box in image coordinates. Returns (embeddings
        (N, embed_dim), cache-or-None). A roi whose pooled feature is
        (near-)zero cannot be normalized: strict mode raises
        NormalizationError; otherwise the row is zeroed and flagged via a
        "valid" bool array in place of the cache.
        """
        cfg = self.cfg
        c4 = acts["conv4"]
        c5 = acts["conv5"]
        stacked = np.concatenate([c4, c5], axis=0)
        roi_arr = np.array([[r.x, r.y, r.w, r.h] for r in rois])
        if threads > 1 and len(rois) >= 2 * threads and not train:
            chunks = np.array_split(np.arange(len(rois)), threads)
            with ThreadPoolExecutor(max_workers=threads) as ex:
                parts = list(ex.map(
                    lambda idx: roi_pool_batch(stacked, roi_arr[idx],
                                               cfg.spatial_scale, cfg.roi_bins)[0],
                    chunks))
            pooled = np.concatenate(parts, axis=0)
        else:
            pooled, _ = roi_pool_batch(stacked, roi_arr, cfg.spatial_scale,
                                       cfg.roi_bins)
        n = pooled.shape[0]
        nch4 = cfg.channels[3]
        p4 = pooled[:, :nch4]
        p5 = pooled[:, nch4:]
        f4 = p4.reshape(n, -1)
        f5 = p5.reshape(n, -1)
        fc_out, fc_cache = conv2d_forward(p5, self.fc_params.weights,
                                          self.fc_params.bias)
        ffc = fc_out.reshape(n, -1)
        valid = ((np.linalg.norm(f4, axis=1) >= L2_EPS)
                 & (np.linalg.norm(f5, axis=1) >= L2_EPS)
                 & (np.linalg.norm(ffc, axis=1) >= L2_EPS))
        if (strict or train) and not valid.all():
            raise NormalizationError(
                f"{int((~valid).sum())} roi(s) pooled to a zero feature")
        if valid.all():
            e1, cache_e1 = l2_normalize_forward(f4)
            e3, cache_e3 = l2_normalize_forward(f5)
            e2, cache_e2 = l2_normalize_forward(ffc)
            concat = np.concatenate([e1, e3, e2], axis=1)
            emb, cache_out = l2_normalize_forward(concat)
        else:
            emb = np.zeros((n, cfg.embed_dim))
            if valid.any():
                e1, _ = l2_normalize_forward(f4[valid])
                e3, _ = l2_normalize_forward(f5[valid])
                e2, _ = l2_normalize_forward(ffc[valid])
                part, _ = l2_normalize_forward(
                    np.concatenate([e1, e3, e2], axis=1))
                emb[valid] = part
        if train:
            return emb, {
                "rois": roi_arr,
                "p4": p4,
                "p5": p5,
                "cache_e1": cache_e1,
                "cache_e3": cache_e3,
                "cache_e2": cache_e2,
                "cache_out": cache_out,
                "fc_cache": fc_cache,
            }
        if strict:
            return emb, None
        return emb, valid

    def embed(self, image, rois, threads=1):
        """One shared backbone pass, then one embedding per roi."""
        acts = self.forward_image(image, train=False)
        emb, _ = self.embed_rois(acts, rois, threads=threads)
        return emb

    # ---------------------------------------------------------- backward

    def backward_rois(self, acts, cache, grad_emb):
        """Backprop embedding gradients to the roi tap maps.

        Accumulates the fc parameter gradient and returns
        (grad_conv4_map, grad_conv5_map).
        """
        cfg = self.cfg
        n = grad_emb.shape[0]
        b2 = cfg.roi_bins * cfg.roi_bins
        d_concat = l2_normalize_backward(grad_emb, cache["cache_out"])
        w4 = b2 * cfg.channels[3]
        w5 = b2 * cfg.channels[4]
        de1 = d_concat[:, :w4]
        de3 = d_concat[:, w4:w4 + w5]
        de2 = d_concat[:, w4 + w5:]
        dp4 = l2_normalize_backward(de1, cache["cache_e1"]).reshape(cache["p4"].shape)
        dp5 = l2_normalize_backward(de3, cache["cache_e3"]).reshape(cache["p5"].shape)
        dfc = l2_normalize_backward(de2, cache["cache_e2"])
        dfc = dfc.reshape(n, cfg.fc_dim, 1, 1)
        dp5_fc, gw, gb = conv2d_backward(dfc, cache["fc_cache"])
        self.fc_params.grad_weights += gw
        self.fc_params.grad_bias += gb
        dp5 = dp5 + dp5_fc
        g4 = roi_pool_backward_batch(acts["conv4"], cache["rois"],
                                     cfg.spatial_scale, dp4, cfg.roi_bins)
        g5 = roi_pool_backward_batch(acts["conv5"], cache["rois"],
                                     cfg.spatial_scale, dp5, cfg.roi_bins)
        return g4, g5

    def backward_image(self, acts, grad_conv4, grad_conv5):
        """Backprop tap-map gradients through the conv stack.

        Stops after the earliest trainable block; the frozen first block
        receives no gradient. Parameter gradients accumulate in place.
        """
        layer_of_block = {}
        for li, bi in enumerate(self.block_index):
            layer_of_block.setdefault(bi, []).append(li)
        g = grad_conv5[None]
        for bi in (4, 3, 2, 1):
            if bi == 3:
                g = g + grad_conv4[None]
            for li in reversed(layer_of_block[bi]):
                p = self.conv_params[li]
                g = relu_backward(g, acts["relu_masks"][li])
                g, gw, gb = conv2d_backward(g, acts["conv_caches"][li])
                p.grad_weights += gw
                p.grad_bias += gb
            if bi == 2:
                g = max_pool2d_backward(g, acts["pool_caches"][1])


# ----------------------------------------------------------- similarity

def match_score(p, q):
    """Inner product of two unit-norm embeddings."""
    return float(np.dot(p, q))


class TemplateBuffer:
    """Bounded FIFO of past best embeddings plus an immutable anchor.

    The anchor is the first-frame ground-truth embedding and is never
    evicted or overwritten.
    """

    def __init__(self, anchor, capacity=35):
        self._anchor = np.array(anchor, dtype=np.float64)
        self.capacity = capacity
        self.entries = deque()

    @property
    def anchor(self):
        return self._anchor

    def __len__(self):
        return len(self.entries)

    def push(self, embedding):
        """Append the newest best embedding, evicting the oldest at capacity."""
        self.entries.append(np.array(embedding, dtype=np.float64))
        while len(self.entries) > self.capacity:
            self.entries.popleft()

    def similarity(self, candidates, eta):
        """Blend anchor and buffered template scores per candidate.

        eta * M(anchor, u) + (1-eta)/|entries| * sum_i M(b_i, u); an empty
        buffer puts all weight on the anchor. candidates: (N, D).
        Returns (N,) scores.
        """
        if not 0.0 <= eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")
        cand = np.asarray(candidates, dtype=np.float64)
        anchor_score = cand @ self._anchor
        if not self.entries:
            return anchor_score
        entry_mat = np.stack(self.entries)
        mean_entry = (cand @ entry_mat.T).mean(axis=1)
        return eta * anchor_score + (1.0 - eta) * mean_entry


def buffered_similarity(candidate, buffer, eta):
    """Single-candidate convenience wrapper over TemplateBuffer.similarity."""
    return float(buffer.similarity(np.asarray(candidate)[None], eta)[0])


# ------------------------------------------------------- pair training

@dataclass
class PairGroup:
    """One anchor roi against several labeled rois from another frame."""

    image_a: np.ndarray
    box_a: Box
    image_b: np.ndarray
    boxes_b: list
    labels: np.ndarray  # 1 same / 0 different
    sequence: int = 0


def build_training_pairs(corpus, rng_seed, pairs_per_sequence=8,
                         rois_per_pair=8, pos_iou=0.7, neg_iou=0.5,
                         sampler=None):
    """Construct contrastive pair groups from ground-truthed sequences.

    corpus: list of (frames, gt_boxes). The first input of each group is
    the ground-truth box of a random frame; the second inputs are boxes
    sampled around the ground truth of a different frame, labeled same
    when IoU > pos_iou and different when IoU < neg_iou (others dropped).
    """
    rng = np.random.default_rng(rng_seed)
    sampler = sampler or SamplerConfig(n_candidates=rois_per_pair * 3,
                                       sigma_xy_factor=0.09, sigma_s2=0.25)
    groups = []
    for si, (frames, gts) in enumerate(corpus):
        if len(frames) < 2:
            log.warning("sequence %d shorter than 2 frames, skipped", si)
            continue
        for _ in range(pairs_per_sequence):
            fa, fb = rng.choice(len(frames), size=2, replace=False)
            gt_b = gts[fb]
            state_b = BoxState.from_box(gt_b)
            cands = sample_candidates([state_b], sampler,
                                      rng.integers(0, 2 ** 63))
            boxes, labels = [gt_b], [1]
            for cand in cands:
                ov = iou(cand.box, gt_b)
                if ov > pos_iou:
                    boxes.append(cand.box)
                    labels.append(1)
                elif ov < neg_iou:
                    boxes.append(cand.box)
                    labels.append(0)
                if len(boxes) >= rois_per_pair:
                    break
            groups.append(PairGroup(frames[fa], gts[fa], frames[fb], boxes,
                                    np.array(labels), sequence=si))
    return groups


def train_siamese(branch, groups, epochs, global_lr=1e-4, momentum=0.9,
                  weight_decay=5e-4, rng_seed=0):
    """Minimize mean contrastive loss over pair groups with SGD.

    The first conv block stays frozen; the fc layer trains at its
    configured learning-rate multiple. Returns the per-epoch mean loss
    trajectory. Raises FloatingPointError if the loss diverges.
    """
    rng = np.random.default_rng(rng_seed)
    sgd = SgdState(branch.param_list, global_lr, momentum, weight_decay)
    margin = branch.cfg.margin
    trajectory = []
    for epoch in range(epochs):
        order = rng.permutation(len(groups))
        total = 0.0
        for gi in order:
            grp = groups[gi]
            acts_a = branch.forward_image(grp.image_a, train=True)
            emb_a, cache_a = branch.embed_rois(acts_a, [grp.box_a], train=True)
            acts_b = branch.forward_image(grp.image_b, train=True)
            emb_b, cache_b = branch.embed_rois(acts_b, grp.boxes_b, train=True)
            tiled_a = np.broadcast_to(emb_a[0], emb_b.shape)
            loss, ga_rows, gb = contrastive_loss_batch(tiled_a, emb_b,
                                                       grp.labels, margin)
            if not np.isfinite(loss):
                raise FloatingPointError(
                    f"siamese training diverged at epoch {epoch} (loss={loss})")
            total += loss
            branch.zero_grad()
            g4, g5 = branch.backward_rois(acts_a, cache_a,
                                          ga_rows.sum(axis=0, keepdims=True))
            branch.backward_image(acts_a, g4, g5)
            g4, g5 = branch.backward_rois(acts_b, cache_b, gb)
            branch.backward_image(acts_b, g4, g5)
            sgd.step()
        trajectory.append(total / max(1, len(groups)))
    return trajectory
