"""Sequence-specific candidate weighting over Siamese embeddings.

A small two-layer 1x1 head maps each embedding to a positive-class logit
w. The fused candidate score is exp(beta*w) times the buffered similarity,
so the weighting can only rescale, never flip, the matcher's opinion. The
head trains online by softmax regression on cached positives against hard
negatives mined from the current model.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .geometry import BoxState
from .nnet.layers import TwoLayerConvHead
from .nnet.optim import SgdState
from .nnet.ops import weighted_softmax_loss

log = logging.getLogger(__name__)

UNIT_CLASS_WEIGHTS = np.array([1.0, 1.0])


@dataclass
class WeightingConfig:
    hidden: int = 64
    beta: float = 0.2
    lr: float = 0.15
    momentum: float = 0.005
    weight_decay: float = 5e-4
    batch_pos: int = 32
    batch_neg: int = 96
    epochs_init: int = 30
    epochs_update: int = 10
    hard_pool: int = 1024

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be non-negative")


@dataclass
class ScoredCandidate:
    """One candidate with its similarity, weight, and fused score."""

    state: BoxState
    embedding: np.ndarray
    sim: float
    weight: float
    fused: float


def new_weighting_head(cfg, embed_dim, rng, init_std=0.01):
    return TwoLayerConvHead(embed_dim, cfg.hidden, rng, init_std=init_std)


def _head_logits(head, embeddings, train=False):
    x = np.asarray(embeddings, dtype=np.float64)
    logits = head.forward(x[:, :, None, None], train=train)
    return logits[:, :, 0, 0]


def wcnn_score(head, embeddings):
    """Positive-class raw logits for a batch of embeddings, shape (N,)."""
    single = np.asarray(embeddings).ndim == 1
    e = np.asarray(embeddings, dtype=np.float64)
    logits = _head_logits(head, e[None] if single else e)
    out = logits[:, 1]
    return float(out[0]) if single else out


def combine_scores(sim, w, beta):
    """Fused candidate score exp(beta*w) * sim."""
    return np.exp(beta * np.asarray(w, dtype=np.float64)) * sim


def estimate_state(candidates):
    """Average the five highest-fused candidates into the frame estimate.

    Ties break by candidate index. Returns (score, BoxState); the score is
    the mean fused score of the selected candidates.
    """
    if not candidates:
        raise ValueError("cannot estimate a state from zero candidates")
    fused = np.array([c.fused for c in candidates])
    order = np.argsort(-fused, kind="stable")[:5]
    score = float(fused[order].mean())
    lx = float(np.mean([candidates[i].state.l_x for i in order]))
    ly = float(np.mean([candidates[i].state.l_y for i in order]))
    s = float(np.mean([candidates[i].state.s for i in order]))
    ref = candidates[order[0]].state
    return score, BoxState(lx, ly, s, ref.w0, ref.h0)


def top_k_fused(states, fused, k=5):
    """Array-level variant of estimate_state used in the tracking loop."""
    order = np.argsort(-np.asarray(fused), kind="stable")[:k]
    score = float(np.asarray(fused)[order].mean())
    lx = float(np.mean([states[i].l_x for i in order]))
    ly = float(np.mean([states[i].l_y for i in order]))
    s = float(np.mean([states[i].s for i in order]))
    ref = states[order[0]]
    return score, BoxState(lx, ly, s, ref.w0, ref.h0), order


def mine_hard_negatives(head, negatives, k):
    """Indices of the k negatives the head currently scores most positive.

    Ties break by index (stable sort); with fewer than k negatives all are
    returned.
    """
    neg = np.asarray(negatives, dtype=np.float64)
    if neg.shape[0] <= k:
        return np.arange(neg.shape[0])
    logits = _head_logits(head, neg)[:, 1]
    return np.sort(np.argsort(-logits, kind="stable")[:k])


def train_weighting(head, pos_embeddings, neg_embeddings, cfg, epochs,
                    rng_seed=0):
    """Softmax-regression updates on positives vs mined hard negatives.

    Each epoch draws batch_pos positives and mines batch_neg hard
    negatives from a random pool of at most hard_pool candidates, then
    takes one SGD step. Embeddings are treated as fixed inputs; gradients
    never reach the Siamese branch. Returns per-epoch losses ([] when
    skipped for lack of positives).
    """
    pos = np.asarray(pos_embeddings, dtype=np.float64)
    neg = np.asarray(neg_embeddings, dtype=np.float64)
    if pos.shape[0] == 0:
        log.warning("weighting update skipped: no positive embeddings")
        return []
    rng = np.random.default_rng(rng_seed)
    sgd = SgdState(head.param_list, cfg.lr, cfg.momentum, cfg.weight_decay,
                   batch_size=cfg.batch_pos + cfg.batch_neg)
    losses = []
    for epoch in range(epochs):
        pi = rng.integers(0, pos.shape[0], size=min(cfg.batch_pos, pos.shape[0]))
        batch_pos = pos[pi]
        if neg.shape[0] > 0:
            pool = rng.permutation(neg.shape[0])[:cfg.hard_pool]
            hard = mine_hard_negatives(head, neg[pool], cfg.batch_neg)
            batch_neg = neg[pool][hard]
        else:
            batch_neg = neg
        batch = np.concatenate([batch_pos, batch_neg], axis=0)
        labels = np.concatenate([
            np.ones(batch_pos.shape[0], dtype=np.int64),
            np.zeros(batch_neg.shape[0], dtype=np.int64),
        ])
        logits = head.forward(batch[:, :, None, None], train=True)
        flat = logits[:, :, 0, 0].T
        loss, grad = weighted_softmax_loss(flat, labels, UNIT_CLASS_WEIGHTS)
        if not np.isfinite(loss):
            raise FloatingPointError(
                f"weighting training diverged at epoch {epoch} (loss={loss})")
        losses.append(loss)
        head.zero_grad()
        head.backward(grad.T[:, :, None, None])
        sgd.step()
    return losses
