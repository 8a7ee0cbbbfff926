"""Candidate weighting: scores, fusion, state estimation, hard mining."""

import math

import numpy as np
import pytest

from adasiam.geometry import Box, BoxState
from adasiam.weighting import (
    ScoredCandidate,
    WeightingConfig,
    combine_scores,
    estimate_state,
    mine_hard_negatives,
    new_weighting_head,
    top_k_fused,
    train_weighting,
    wcnn_score,
)

from oracles import full_sort_hard_negatives

DIM = 24


@pytest.fixture
def cfg():
    return WeightingConfig(hidden=8, hard_pool=64)


def _unit_rows(rng, n, dim=DIM):
    x = rng.normal(size=(n, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


# ------------------------------------------------------------------ score

def test_zero_parameter_head_scores_zero(cfg):
    head = new_weighting_head(cfg, DIM, rng=None)
    rng = np.random.default_rng(0)
    scores = wcnn_score(head, _unit_rows(rng, 5))
    assert np.all(scores == 0.0)


def test_scaling_final_layer_scales_logit_margin(cfg):
    head = new_weighting_head(cfg, DIM, np.random.default_rng(1))
    rng = np.random.default_rng(2)
    embs = _unit_rows(rng, 6)
    from adasiam.weighting import _head_logits

    before = _head_logits(head, embs)
    margin_before = before[:, 1] - before[:, 0]
    head.conv2.params.weights *= 3.0
    head.conv2.params.bias *= 3.0
    after = _head_logits(head, embs)
    assert np.allclose(after[:, 1] - after[:, 0], 3.0 * margin_before,
                       atol=1e-12)


def test_batched_equals_single(cfg):
    head = new_weighting_head(cfg, DIM, np.random.default_rng(3))
    rng = np.random.default_rng(4)
    embs = _unit_rows(rng, 7)
    batch = wcnn_score(head, embs)
    singles = np.array([wcnn_score(head, e) for e in embs])
    assert np.max(np.abs(batch - singles)) < 1e-12


# ------------------------------------------------------------------ fusion

def test_combine_beta_zero_identity():
    for w in (-3.0, 0.0, 4.2):
        assert combine_scores(0.87, w, 0.0) == 0.87


def test_combine_weight_zero_identity():
    assert combine_scores(0.55, 0.0, 0.2) == 0.55


def test_combine_hand_value():
    want = 0.9 * math.exp(0.6)  # beta=0.2, w=3, sim=0.9
    assert abs(combine_scores(0.9, 3.0, 0.2) - want) < 1e-12


def test_combine_preserves_sign_and_monotone():
    rng = np.random.default_rng(5)
    for _ in range(50):
        sim = float(rng.uniform(-1, 1))
        w1, w2 = sorted(rng.normal(size=2))
        a = combine_scores(sim, w1, 0.2)
        b = combine_scores(sim, w2, 0.2)
        assert np.sign(a) == np.sign(sim) or sim == 0
        if sim > 0:
            assert b >= a
        elif sim < 0:
            assert b <= a


def test_constant_weight_shift_keeps_ranking():
    rng = np.random.default_rng(6)
    sims = rng.uniform(0.1, 1.0, 10)
    ws = rng.normal(size=10)
    base = combine_scores(sims, ws, 0.2)
    shifted = combine_scores(sims, ws + 5.0, 0.2)
    assert np.array_equal(np.argsort(-base), np.argsort(-shifted))


# ---------------------------------------------------------------- top five

def _cand(x, fused):
    state = BoxState(x, 2.0 * x, 1.0, 10, 10)
    return ScoredCandidate(state, np.zeros(3), fused, 0.0, fused)


def test_estimate_single_candidate():
    score, state = estimate_state([_cand(5.0, 0.7)])
    assert score == 0.7
    assert state.l_x == 5.0


def test_estimate_five_identical():
    cands = [_cand(3.0, 0.9) for _ in range(5)]
    score, state = estimate_state(cands)
    assert score == 0.9 and state.l_x == 3.0 and state.l_y == 6.0


def test_estimate_hand_sorted_top5_mean():
    fused = [0.1, 0.9, 0.5, 0.7, 0.3, 0.8, 0.2, 0.6]
    xs = list(range(8))
    cands = [_cand(float(x), f) for x, f in zip(xs, fused)]
    # top five by fused: indices 1 (0.9), 5 (0.8), 3 (0.7), 7 (0.6), 2 (0.5)
    want_score = np.mean([0.9, 0.8, 0.7, 0.6, 0.5])
    want_x = np.mean([1, 5, 3, 7, 2])
    score, state = estimate_state(cands)
    assert abs(score - want_score) < 1e-12
    assert abs(state.l_x - want_x) < 1e-12


def test_estimate_tie_breaks_by_index():
    cands = [_cand(float(i), 0.5) for i in range(8)]
    score, state = estimate_state(cands)
    assert state.l_x == np.mean([0, 1, 2, 3, 4])


def test_estimate_empty_raises():
    with pytest.raises(ValueError):
        estimate_state([])


def test_top_k_fused_matches_estimate():
    fused = [0.3, 0.9, 0.1, 0.8, 0.6, 0.4]
    states = [BoxState(float(i), 0.0, 1.0, 8, 8) for i in range(6)]
    cands = [ScoredCandidate(s, np.zeros(2), f, 0.0, f)
             for s, f in zip(states, fused)]
    s1, st1 = estimate_state(cands)
    s2, st2, order = top_k_fused(states, np.array(fused))
    assert s1 == s2 and st1 == st2
    assert order[0] == 1


# ------------------------------------------------------------ hard mining

def test_mining_identity_when_k_covers_all(cfg):
    head = new_weighting_head(cfg, DIM, np.random.default_rng(7))
    embs = _unit_rows(np.random.default_rng(8), 10)
    idx = mine_hard_negatives(head, embs, 10)
    assert np.array_equal(idx, np.arange(10))


def test_mining_zero_head_tie_break_first_k(cfg):
    head = new_weighting_head(cfg, DIM, rng=None)
    embs = _unit_rows(np.random.default_rng(9), 12)
    idx = mine_hard_negatives(head, embs, 4)
    assert np.array_equal(idx, np.arange(4))


def test_mining_matches_full_sort_oracle(cfg):
    head = new_weighting_head(cfg, DIM, np.random.default_rng(10))
    embs = _unit_rows(np.random.default_rng(11), 200)
    idx = mine_hard_negatives(head, embs, 96)
    scores = wcnn_score(head, embs)
    want = full_sort_hard_negatives(list(scores), 96)
    assert np.array_equal(idx, np.array(want))


# -------------------------------------------------------------- training

def test_train_zero_epochs_no_change(cfg):
    head = new_weighting_head(cfg, DIM, np.random.default_rng(12))
    before = [p.weights.copy() for p in head.param_list]
    rng = np.random.default_rng(13)
    losses = train_weighting(head, _unit_rows(rng, 10), _unit_rows(rng, 20),
                             cfg, epochs=0)
    assert losses == []
    for p, b in zip(head.param_list, before):
        assert np.array_equal(p.weights, b)


def test_train_skips_without_positives(cfg):
    head = new_weighting_head(cfg, DIM, np.random.default_rng(14))
    before = [p.weights.copy() for p in head.param_list]
    losses = train_weighting(head, np.zeros((0, DIM)),
                             _unit_rows(np.random.default_rng(15), 5), cfg, 10)
    assert losses == []
    for p, b in zip(head.param_list, before):
        assert np.array_equal(p.weights, b)


def test_training_separates_clusters(cfg):
    rng = np.random.default_rng(16)
    base_pos = rng.normal(size=DIM)
    base_neg = rng.normal(size=DIM)
    pos = base_pos + 0.2 * rng.normal(size=(60, DIM))
    neg = base_neg + 0.2 * rng.normal(size=(120, DIM))
    pos /= np.linalg.norm(pos, axis=1, keepdims=True)
    neg /= np.linalg.norm(neg, axis=1, keepdims=True)
    head = new_weighting_head(cfg, DIM, np.random.default_rng(17))
    losses = train_weighting(head, pos, neg, cfg, epochs=30, rng_seed=18)
    assert losses[-1] < losses[0]
    assert wcnn_score(head, pos).mean() > wcnn_score(head, neg).mean()


def test_head_gradient_matches_finite_differences(cfg):
    from adasiam.nnet import finite_diff_grad, weighted_softmax_loss
    from adasiam.nnet.gradcheck import relative_error
    from adasiam.weighting import UNIT_CLASS_WEIGHTS

    head = new_weighting_head(cfg, DIM, np.random.default_rng(19))
    rng = np.random.default_rng(20)
    batch = _unit_rows(rng, 9)
    labels = rng.integers(0, 2, size=9)

    def loss_fn():
        logits = head.forward(batch[:, :, None, None], train=True)
        return weighted_softmax_loss(logits[:, :, 0, 0].T, labels,
                                     UNIT_CLASS_WEIGHTS)

    _, grad = loss_fn()
    head.zero_grad()
    head.backward(grad.T[:, :, None, None])
    for params in head.param_list:
        analytic = params.grad_weights.copy()
        original = params.weights.copy()

        def f(w, p=params):
            p.weights[...] = w
            return loss_fn()[0]

        numeric = finite_diff_grad(f, original.copy(), eps=1e-6)
        params.weights[...] = original
        assert relative_error(analytic, numeric) < 1e-4
