"""Siamese branch embeddings, buffer similarity, and pair training."""

import numpy as np
import pytest

from adasiam.geometry import Box
from adasiam.matcher import (
    MatcherConfig,
    PairGroup,
    SiameseBranch,
    TemplateBuffer,
    build_training_pairs,
    buffered_similarity,
    match_score,
    train_siamese,
)
from adasiam.nnet import NormalizationError
from adasiam.sequences import MotionSpec, SequenceSpec, generate_sequence

TINY = MatcherConfig(input_size=32, channels=(4, 4, 8, 8, 8),
                     sublayers=(1, 1, 1, 1, 1), fc_dim=16)


@pytest.fixture(scope="module")
def tiny_branch():
    return SiameseBranch(TINY, np.random.default_rng(0))


@pytest.fixture(scope="module")
def tiny_image():
    return np.random.default_rng(1).uniform(0.1, 0.9, (3, 32, 32))


def test_embed_dim_accounting():
    assert TINY.embed_dim == 49 * 8 + 49 * 8 + 16
    assert MatcherConfig().embed_dim == 49 * 64 + 49 * 64 + 512


def test_embeddings_unit_norm(tiny_branch, tiny_image):
    rois = [Box(4, 4, 12, 14), Box(10, 8, 16, 10), Box(0, 0, 32, 32)]
    emb = tiny_branch.embed(tiny_image, rois)
    norms = np.linalg.norm(emb, axis=1)
    assert np.all(np.abs(norms - 1.0) < 1e-9)


def test_identical_rois_identical_embeddings(tiny_branch, tiny_image):
    rois = [Box(5, 5, 12, 12), Box(5, 5, 12, 12)]
    emb = tiny_branch.embed(tiny_image, rois)
    assert np.array_equal(emb[0], emb[1])


def test_batched_equals_per_roi(tiny_branch, tiny_image):
    rois = [Box(2, 3, 10, 12), Box(8, 1, 14, 16), Box(12, 12, 18, 18),
            Box(1, 20, 9, 9)]
    batch = tiny_branch.embed(tiny_image, rois)
    singles = np.concatenate([tiny_branch.embed(tiny_image, [r]) for r in rois])
    assert np.max(np.abs(batch - singles)) < 1e-12


def test_threaded_embedding_matches_serial(tiny_branch, tiny_image):
    rois = [Box(2 + i, 3, 10, 12) for i in range(12)]
    acts = tiny_branch.forward_image(tiny_image)
    serial, _ = tiny_branch.embed_rois(acts, rois, threads=1)
    threaded, _ = tiny_branch.embed_rois(acts, rois, threads=3)
    assert np.array_equal(serial, threaded)


def test_degenerate_roi_raises(tiny_branch, tiny_image):
    with pytest.raises(NormalizationError):
        tiny_branch.embed(tiny_image, [Box(500, 500, 10, 10)])


def test_degenerate_roi_masked_when_not_strict(tiny_branch, tiny_image):
    acts = tiny_branch.forward_image(tiny_image)
    emb, valid = tiny_branch.embed_rois(
        acts, [Box(5, 5, 10, 10), Box(500, 500, 10, 10)], strict=False)
    assert valid.tolist() == [True, False]
    assert np.all(emb[1] == 0.0)
    assert abs(np.linalg.norm(emb[0]) - 1.0) < 1e-9


# ------------------------------------------------------------ match score

def test_match_score_self_and_negation():
    rng = np.random.default_rng(2)
    x = rng.normal(size=16)
    x /= np.linalg.norm(x)
    assert abs(match_score(x, x) - 1.0) < 1e-12
    assert abs(match_score(x, -x) + 1.0) < 1e-12


def test_match_score_symmetric():
    rng = np.random.default_rng(3)
    for _ in range(20):
        p = rng.normal(size=8)
        q = rng.normal(size=8)
        p /= np.linalg.norm(p)
        q /= np.linalg.norm(q)
        assert abs(match_score(p, q) - match_score(q, p)) < 1e-15


# ----------------------------------------------------------------- buffer

def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def test_buffer_of_anchor_copies_collapses():
    anchor = _unit([1.0, 2.0, 3.0])
    buf = TemplateBuffer(anchor, capacity=35)
    for _ in range(5):
        buf.push(anchor.copy())
    cand = _unit([0.5, -1.0, 2.0])
    for eta in (0.0, 0.3, 0.7, 1.0):
        got = buffered_similarity(cand, buf, eta)
        assert abs(got - match_score(anchor, cand)) < 1e-12


def test_buffer_anchor_candidate_gives_one():
    anchor = _unit([0.2, 0.9, 0.1, 0.4])
    buf = TemplateBuffer(anchor)
    buf.push(anchor.copy())
    assert abs(buffered_similarity(anchor, buf, 0.7) - 1.0) < 1e-12


def test_buffer_hand_value_084():
    # eta=0.7, anchor score 0.9, entries scoring 0.6 and 0.8 -> 0.84
    anchor = np.array([1.0, 0.0])
    e1 = np.array([0.6, np.sqrt(1 - 0.36)])
    e2 = np.array([0.8, 0.6])
    cand = np.array([1.0, 0.0])
    buf = TemplateBuffer(np.array([0.9, np.sqrt(1 - 0.81)]))
    buf.entries.extend([e1, e2])
    got = buffered_similarity(cand, buf, 0.7)
    assert abs(got - 0.84) < 1e-12


def test_empty_buffer_falls_back_to_anchor():
    anchor = _unit([3.0, 4.0])
    buf = TemplateBuffer(anchor)
    cand = _unit([4.0, 3.0])
    assert abs(buffered_similarity(cand, buf, 0.7)
               - match_score(anchor, cand)) < 1e-12


def test_buffer_fifo_capacity():
    anchor = _unit(np.ones(4))
    buf = TemplateBuffer(anchor, capacity=35)
    for i in range(35):
        buf.push(_unit(np.arange(4) + i + 1.0))
    assert len(buf) == 35
    first = buf.entries[0].copy()
    buf.push(_unit(np.ones(4) * 9.0))
    assert len(buf) == 35
    assert not np.array_equal(buf.entries[0], first)


def test_buffer_insertion_order_preserved():
    buf = TemplateBuffer(_unit(np.ones(3)), capacity=10)
    vecs = [_unit([i + 1.0, 1.0, 0.5]) for i in range(6)]
    for v in vecs:
        buf.push(v)
    for got, want in zip(buf.entries, vecs):
        assert np.array_equal(got, want)


def test_anchor_immutable_across_pushes():
    anchor = _unit([1.0, 5.0, 2.0])
    buf = TemplateBuffer(anchor, capacity=8)
    before = buf.anchor.tobytes()
    rng = np.random.default_rng(0)
    for _ in range(100):
        buf.push(_unit(rng.normal(size=3)))
    assert buf.anchor.tobytes() == before


def test_similarity_monotone_in_entry_scores():
    anchor = np.array([1.0, 0.0])
    buf = TemplateBuffer(anchor)
    buf.entries.append(np.array([0.5, np.sqrt(0.75)]))
    cand = np.array([1.0, 0.0])
    low = buffered_similarity(cand, buf, 0.5)
    buf.entries[0] = np.array([0.9, np.sqrt(1 - 0.81)])
    high = buffered_similarity(cand, buf, 0.5)
    assert high > low


def test_similarity_bounded_for_unit_inputs():
    rng = np.random.default_rng(5)
    anchor = _unit(rng.normal(size=6))
    buf = TemplateBuffer(anchor)
    for _ in range(7):
        buf.push(_unit(rng.normal(size=6)))
    for _ in range(50):
        cand = _unit(rng.normal(size=6))
        v = buffered_similarity(cand, buf, float(rng.uniform(0, 1)))
        assert -1.0 - 1e-12 <= v <= 1.0 + 1e-12


def test_eta_one_ignores_entries():
    rng = np.random.default_rng(6)
    anchor = _unit(rng.normal(size=5))
    buf = TemplateBuffer(anchor)
    cand = _unit(rng.normal(size=5))
    base = buffered_similarity(cand, buf, 1.0)
    for _ in range(9):
        buf.push(_unit(rng.normal(size=5)))
    assert buffered_similarity(cand, buf, 1.0) == base == match_score(anchor, cand)


# ---------------------------------------------------------- pair building

def _toy_corpus(n_seq=2, length=8):
    corpus = []
    for i in range(n_seq):
        spec = SequenceSpec(length=length, image_size=32, target_size=(12, 12),
                            motion=MotionSpec(walk_sigma=1.0))
        corpus.append(generate_sequence(spec, seed=50 + i))
    return corpus


def test_build_pairs_labels_match_iou_oracle():
    from oracles import pixel_count_iou  # labels re-derived below with iou

    from adasiam.geometry import iou as iou_fn

    corpus = _toy_corpus()
    groups = build_training_pairs(corpus, rng_seed=3, pairs_per_sequence=4)
    assert groups
    for grp in groups:
        gt_b = None
        # first box is the exact gt of frame b: it must be labeled same
        assert grp.labels[0] == 1
        for box, label in zip(grp.boxes_b, grp.labels):
            if gt_b is None:
                gt_b = box
                continue
            ov = iou_fn(box, gt_b)
            if label == 1:
                assert ov > 0.7
            else:
                assert ov < 0.5


def test_build_pairs_skips_single_frame_sequences(caplog):
    corpus = _toy_corpus(1, 8)
    short = [([corpus[0][0][0]], [corpus[0][1][0]])]
    groups = build_training_pairs(corpus + short, rng_seed=1,
                                  pairs_per_sequence=2)
    seqs = {g.sequence for g in groups}
    assert 1 not in seqs


def test_pairs_deterministic():
    corpus = _toy_corpus()
    a = build_training_pairs(corpus, rng_seed=9, pairs_per_sequence=3)
    b = build_training_pairs(corpus, rng_seed=9, pairs_per_sequence=3)
    assert len(a) == len(b)
    for ga, gb in zip(a, b):
        assert ga.boxes_b == gb.boxes_b
        assert np.array_equal(ga.labels, gb.labels)


# --------------------------------------------------------------- training

def test_train_zero_epochs_no_change():
    branch = SiameseBranch(TINY, np.random.default_rng(0))
    before = {k: v.copy() for k, v in branch.named_params().items()}
    losses = train_siamese(branch, [], epochs=0)
    assert losses == []
    for k, v in branch.named_params().items():
        assert np.array_equal(v, before[k])


def test_training_halves_toy_loss_and_freezes_first_block():
    corpus = _toy_corpus(2, 8)
    branch = SiameseBranch(TINY, np.random.default_rng(7))
    frozen_before = [branch.conv_params[0].weights.copy()]
    groups = build_training_pairs(corpus, rng_seed=5, pairs_per_sequence=6,
                                  rois_per_pair=6)
    losses = train_siamese(branch, groups, epochs=30, global_lr=3e-4,
                           rng_seed=11)
    assert losses[-1] < 0.5 * losses[0]
    assert np.array_equal(branch.conv_params[0].weights, frozen_before[0])
    assert branch.conv_params[0].frozen


@pytest.mark.parametrize("param_name", ["conv2", "conv4", "fc"])
def test_full_embedding_pipeline_gradient(param_name):
    from adasiam.nnet import finite_diff_grad
    from adasiam.nnet.gradcheck import relative_error

    cfg = MatcherConfig(input_size=16, channels=(2, 2, 3, 3, 3),
                        sublayers=(1, 1, 1, 1, 1), fc_dim=6)
    branch = SiameseBranch(cfg, np.random.default_rng(21))
    rng = np.random.default_rng(22)
    image = rng.uniform(0.1, 0.9, (3, 16, 16))
    rois = [Box(1, 2, 9, 10), Box(4, 4, 11, 8)]
    probe = rng.normal(size=(2, cfg.embed_dim))

    def embed_loss():
        acts = branch.forward_image(image, train=True)
        emb, cache = branch.embed_rois(acts, rois, train=True)
        return acts, cache, float((emb * probe).sum())

    acts, cache, _ = embed_loss()
    branch.zero_grad()
    g4, g5 = branch.backward_rois(acts, cache, probe)
    branch.backward_image(acts, g4, g5)

    if param_name == "fc":
        params = branch.fc_params
    elif param_name == "conv4":
        params = branch.conv_params[3]
    else:
        params = branch.conv_params[1]
    analytic = params.grad_weights.copy()

    def loss_fn(w):
        params.weights[...] = w
        return embed_loss()[2]

    original = params.weights.copy()
    numeric = finite_diff_grad(loss_fn, original.copy(), eps=1e-6)
    params.weights[...] = original
    assert relative_error(analytic, numeric) < 1e-4


def test_checkpoint_round_trip_through_branch(tmp_path):
    from adasiam.nnet import load_checkpoint, save_checkpoint

    branch = SiameseBranch(TINY, np.random.default_rng(3))
    path = tmp_path / "siamese.adsm1"
    save_checkpoint(path, branch.named_params())
    other = SiameseBranch(TINY)
    other.load_named(load_checkpoint(path))
    for (ka, va), (kb, vb) in zip(branch.named_params().items(),
                                  other.named_params().items()):
        assert ka == kb
        assert va.tobytes() == vb.tobytes()


def test_checkpoint_shape_mismatch_names_field(tmp_path):
    from adasiam.nnet import load_checkpoint, save_checkpoint

    branch = SiameseBranch(TINY, np.random.default_rng(3))
    path = tmp_path / "siamese.adsm1"
    save_checkpoint(path, branch.named_params())
    bigger = MatcherConfig(input_size=32, channels=(8, 8, 8, 8, 8),
                           sublayers=(1, 1, 1, 1, 1), fc_dim=16)
    other = SiameseBranch(bigger)
    with pytest.raises(ValueError, match="siamese.conv0.weights"):
        other.load_named(load_checkpoint(path))
