"""The online tracking loop.

Per frame: the motion network proposes a second sampling center from the
score-map peak over a search window at the previous estimate; Gaussian
candidates drawn around both centers are embedded by the Siamese branch,
scored against the template buffer, reweighted by the sequence-specific
head, and the top five fused candidates average into the new estimate.
High-confidence frames (score above the gate, or the warmup frames) feed
the buffer and the training caches; low-confidence frames trigger a
short-term model update, and every tau_interval-th confident frame a
long-term one.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    Box,
    BoxState,
    PatchError,
    SamplerConfig,
    cosine_window,
    iou,
    sample_candidates,
)
from .matcher import SiameseBranch, TemplateBuffer
from .motion import (
    MotionFeatureNet,
    backproject_argmax,
    extract_search_features,
    make_score_labels,
    make_search_window,
    new_score_head,
    score_map,
    train_score_head,
)
from .weighting import (
    combine_scores,
    new_weighting_head,
    top_k_fused,
    train_weighting,
    wcnn_score,
)

log = logging.getLogger(__name__)

VARIANTS = ("full", "no-men", "no-wcnn", "no-buffer")

# rng stream tags, one per random consumer, so a frame's draws never
# depend on what earlier frames consumed
_RNG_INIT = 0
_RNG_CANDIDATES = 1
_RNG_TRAIN_CAND = 2
_RNG_WEIGHT_UPDATE = 3
_RNG_MOTION_UPDATE = 4


@dataclass
class GateDecision:
    """Which of the per-frame update branches fire."""

    gated: bool
    short: bool
    long: bool


def plan_updates(score, t, cfg):
    """Literal gating: buffer/caches when score > gate or t < warmup;
    short-term update when score < gate; otherwise long-term update on
    every tau_interval-th frame. A score exactly at the gate triggers
    neither strict branch."""
    gated = score > cfg.score_gate or t < cfg.warmup_frames
    short = score < cfg.score_gate
    long_ = (not short) and (t % cfg.tau_interval == 0)
    return GateDecision(gated, short, long_)


@dataclass
class FrameCache:
    """Per-frame training features kept while the frame is in memory."""

    pos_emb: np.ndarray
    neg_emb: np.ndarray
    motion_maps: np.ndarray | None


class MemoryStore:
    """Short/long frame-index windows plus their cached features.

    Eviction always removes the minimum (oldest) index. Negative
    embeddings live only as long as the frame stays in the short set;
    everything else until it leaves the long set.
    """

    def __init__(self, tau_short, tau_long):
        self.tau_short = tau_short
        self.tau_long = tau_long
        self.short = []
        self.long = []
        self._caches = {}

    def add(self, t, cache):
        self.short.append(t)
        self.long.append(t)
        self._caches[t] = cache
        if len(self.long) > self.tau_long:
            dropped = self.long.pop(0)
            self._caches.pop(dropped, None)
        if len(self.short) > self.tau_short:
            dropped = self.short.pop(0)
            if dropped in self._caches:
                self._caches[dropped].neg_emb = np.zeros(
                    (0,) + self._caches[dropped].neg_emb.shape[1:])

    def cache(self, t):
        return self._caches.get(t)

    def positives(self, indices):
        mats = [self._caches[t].pos_emb for t in indices
                if t in self._caches and self._caches[t].pos_emb.shape[0]]
        return np.concatenate(mats, axis=0) if mats else np.zeros((0, 1))

    def negatives(self, indices):
        mats = [self._caches[t].neg_emb for t in indices
                if t in self._caches and self._caches[t].neg_emb.shape[0]]
        return np.concatenate(mats, axis=0) if mats else np.zeros((0, 1))

    def motion_maps(self, indices):
        mats = [self._caches[t].motion_maps for t in indices
                if t in self._caches and self._caches[t].motion_maps is not None
                and self._caches[t].motion_maps.shape[0]]
        return np.concatenate(mats, axis=0) if mats else None


def maintain_memories(mem, t, cache):
    """Append frame t to both windows and evict past the bounds."""
    mem.add(t, cache)
    return mem


@dataclass
class FrameResult:
    t: int
    state: BoxState
    score: float
    buffer_size: int
    updated_short: bool
    updated_long: bool
    lost: bool = False
    weights_zero: bool = False

    @property
    def box(self):
        return self.state.box


class TrackerError(RuntimeError):
    """Initialization failed (degenerate first-frame box)."""


@dataclass
class ScoreRecord:
    """Optional per-candidate dump for debugging and the ablation harness."""

    t: int
    sims: np.ndarray
    weights: np.ndarray
    fused: np.ndarray


class Tracker:
    """Single-target tracker; one instance per sequence run."""

    def __init__(self, branch: SiameseBranch, feature_net: MotionFeatureNet,
                 cfg, seed, variant="full", threads=1,
                 record_scores=False, record_heatmaps=False):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}, expected one of "
                             f"{VARIANTS}")
        self.branch = branch
        self.fnet = feature_net
        self.cfg = cfg
        self.seed = int(seed)
        self.variant = variant
        self.threads = threads
        self.record_scores = record_scores
        self.record_heatmaps = record_heatmaps
        self.score_records = []
        self.heatmaps = []
        self.t = 0
        self.state = None
        self.score = float("nan")
        self.buffer = None
        self.weight_head = None
        self.score_head = None
        self.memories = MemoryStore(cfg.tau_short, cfg.tau_long)
        self._coswin = cosine_window(cfg.motion.map_size, cfg.motion.map_size)
        self._labels, self._class_weights = make_score_labels(cfg.motion)
        self._lost_streak = 0

    # ------------------------------------------------------------- rng

    def _rng(self, tag, t):
        return np.random.default_rng(np.random.SeedSequence([self.seed, t, tag]))

    def _seed(self, tag, t):
        return np.random.SeedSequence([self.seed, t, tag])

    # ----------------------------------------------------- sample pools

    def _sample_labeled(self, frame_shape, center, n_pos, n_neg, neg_iou, rng):
        """Rejection-sample training boxes around a state.

        Positives (IoU > pos_iou with the center box) come from the
        scoring Gaussian; negatives (IoU < neg_iou) from a widened
        Gaussian mixed with uniform placements so background and
        distractor regions are represented.
        """
        cfg = self.cfg
        _, img_h, img_w = frame_shape
        gt_box = center.box
        pos_states, neg_states = [], []
        tight = SamplerConfig(
            n_candidates=max(64, n_pos),
            sigma_xy_factor=cfg.sampler.sigma_xy_factor / 4.0,
            sigma_s2=cfg.sampler.sigma_s2 / 4.0,
            scale_step=cfg.sampler.scale_step)
        wide = SamplerConfig(
            n_candidates=max(64, n_neg // 2),
            sigma_xy_factor=cfg.sampler.sigma_xy_factor * 9.0,
            sigma_s2=cfg.sampler.sigma_s2,
            scale_step=cfg.sampler.scale_step)
        n_uniform = max(32, n_neg // 2)
        for _ in range(20):
            if len(pos_states) < n_pos:
                for cand in sample_candidates([center], tight,
                                              rng.integers(0, 2 ** 63)):
                    if len(pos_states) >= n_pos:
                        break
                    if not self._in_frame(cand.box, img_w, img_h):
                        continue
                    if iou(cand.box, gt_box) > cfg.pos_iou:
                        pos_states.append(cand)
            if len(neg_states) < n_neg:
                for cand in sample_candidates([center], wide,
                                              rng.integers(0, 2 ** 63)):
                    if len(neg_states) >= n_neg:
                        break
                    if not self._in_frame(cand.box, img_w, img_h):
                        continue
                    if iou(cand.box, gt_box) < neg_iou:
                        neg_states.append(cand)
            if len(neg_states) < n_neg:
                xs = rng.uniform(0, img_w, size=n_uniform)
                ys = rng.uniform(0, img_h, size=n_uniform)
                ss = center.s * np.exp(rng.uniform(-0.35, 0.35, size=n_uniform))
                for x, y, s in zip(xs, ys, ss):
                    if len(neg_states) >= n_neg:
                        break
                    cand = BoxState(x, y, float(np.clip(s, 0.2, 5.0)),
                                    center.w0, center.h0)
                    if not self._in_frame(cand.box, img_w, img_h):
                        continue
                    if iou(cand.box, gt_box) < neg_iou:
                        neg_states.append(cand)
            if len(pos_states) >= n_pos and len(neg_states) >= n_neg:
                break
        if len(pos_states) < n_pos or len(neg_states) < n_neg:
            log.warning("sample quota not met at t=%d: %d/%d pos, %d/%d neg",
                        self.t, len(pos_states), n_pos, len(neg_states), n_neg)
        return pos_states, neg_states

    @staticmethod
    def _in_frame(box, img_w, img_h):
        return (box.x + box.w > 0 and box.y + box.h > 0
                and box.x < img_w and box.y < img_h)

    def _motion_maps_for(self, frame, states, k, rng):
        """Windowed feature maps over windows centered on k chosen states."""
        if self.variant == "no-men" or k <= 0 or not states:
            return None
        idx = rng.permutation(len(states))[:k]
        maps = []
        for i in idx:
            window = make_search_window(states[i], self.cfg.motion.window_factor)
            try:
                maps.append(extract_search_features(self.fnet, frame, window,
                                                    self._coswin))
            except PatchError:
                continue
        return np.stack(maps) if maps else None

    # ------------------------------------------------------------- init

    def initialize(self, frame, gt_box):
        """First-frame setup: anchor the buffer, train both heads, seed
        the memories, and adopt the ground truth as the first estimate."""
        cfg = self.cfg
        frame = np.asarray(frame, dtype=np.float64)
        _, img_h, img_w = frame.shape
        if not self._in_frame(gt_box, img_w, img_h):
            raise TrackerError(f"first-frame box {gt_box} lies outside the image")
        self.t = 1
        self.state = BoxState.from_box(gt_box)
        self.score = float("nan")

        acts = self.branch.forward_image(frame)
        anchor, _ = self.branch.embed_rois(acts, [gt_box])
        self.buffer = TemplateBuffer(anchor[0], cfg.buffer_capacity)
        self.buffer.push(anchor[0])

        rng = self._rng(_RNG_INIT, 1)
        self.weight_head = new_weighting_head(cfg.weighting,
                                              cfg.matcher.embed_dim, rng)
        self.score_head = new_score_head(cfg.motion, rng)

        pos_states, neg_states = self._sample_labeled(
            frame.shape, self.state, cfg.n_init_pos, cfg.n_init_neg,
            cfg.neg_iou_init, rng)
        pos_emb, _ = self.branch.embed_rois(
            acts, [s.box for s in pos_states], threads=self.threads)
        neg_emb, _ = self.branch.embed_rois(
            acts, [s.box for s in neg_states], threads=self.threads)

        if self.variant != "no-wcnn":
            train_weighting(self.weight_head, pos_emb, neg_emb, cfg.weighting,
                            cfg.weighting_epochs_init,
                            rng_seed=self._seed(_RNG_WEIGHT_UPDATE, 1))
        maps = self._motion_maps_for(frame, pos_states, cfg.motion_pos_init, rng)
        if maps is not None:
            train_score_head(self.score_head, maps, self._labels,
                             self._class_weights, cfg.motion_epochs_init,
                             cfg.motion, rng_seed=self._seed(_RNG_MOTION_UPDATE, 1))

        keep_pos = pos_emb[:cfg.n_update_pos]
        keep_neg = neg_emb[:cfg.n_update_neg]
        maintain_memories(self.memories, 1,
                          FrameCache(keep_pos, keep_neg, maps))
        return self

    # ------------------------------------------------------------- step

    def step(self, frame):
        """Track one frame; returns a FrameResult and advances the state."""
        if self.state is None:
            raise TrackerError("tracker not initialized")
        cfg = self.cfg
        frame = np.asarray(frame, dtype=np.float64)
        _, img_h, img_w = frame.shape
        self.t += 1
        t = self.t

        centers = [self.state]
        if self.variant != "no-men":
            men_center = self._motion_center(frame)
            if men_center is not None:
                centers = [men_center, self.state]

        cand_states = sample_candidates(centers, cfg.sampler,
                                        self._seed(_RNG_CANDIDATES, t))
        kept = [s for s in cand_states if self._in_frame(s.box, img_w, img_h)]
        if not kept:
            return self._lost_frame()

        acts = self.branch.forward_image(frame)
        embs, valid = self.branch.embed_rois(
            acts, [s.box for s in kept], threads=self.threads, strict=False)
        kept = [s for s, v in zip(kept, valid) if v]
        embs = embs[valid]
        if not kept:
            return self._lost_frame()

        eta = 1.0 if self.variant == "no-buffer" else cfg.eta
        sims = self.buffer.similarity(embs, eta)
        if self.variant == "no-wcnn":
            weights = np.zeros(len(kept))
            fused = sims.copy()
        else:
            weights = wcnn_score(self.weight_head, embs)
            fused = combine_scores(sims, weights, cfg.weighting.beta)

        score, new_state, order = top_k_fused(kept, fused)
        if self.record_scores:
            self.score_records.append(ScoreRecord(t, sims, weights, fused))

        decision = plan_updates(score, t, cfg)
        if decision.gated:
            if self.variant != "no-buffer":
                self.buffer.push(embs[order[0]])
            self._collect_caches(frame, acts, new_state, t)
        updated_short = updated_long = False
        if decision.short:
            updated_short = self._update_models(self.memories.short,
                                                self.memories.short, t)
        elif decision.long:
            updated_long = self._update_models(self.memories.long,
                                               self.memories.short, t)

        self.state = new_state
        self.score = score
        self._lost_streak = 0
        return FrameResult(t, new_state, score, len(self.buffer),
                           updated_short, updated_long,
                           weights_zero=self.variant == "no-wcnn")

    def _motion_center(self, frame):
        window = make_search_window(self.state, self.cfg.motion.window_factor)
        try:
            feats = extract_search_features(self.fnet, frame, window,
                                            self._coswin)
        except PatchError:
            return None
        logits = score_map(self.score_head, feats)
        positive = logits[1]
        if self.record_heatmaps:
            self.heatmaps.append((self.t, positive.copy(), window))
        x, y = backproject_argmax(positive, window)
        return self.state.moved_to(x, y)

    def _collect_caches(self, frame, acts, around, t):
        """Fresh training candidates around the new estimate, cached as
        embeddings (and windowed motion features) at collection time."""
        cfg = self.cfg
        rng = self._rng(_RNG_TRAIN_CAND, t)
        pos_states, neg_states = self._sample_labeled(
            frame.shape, around, cfg.n_update_pos, cfg.n_update_neg,
            cfg.neg_iou_update, rng)
        dim = cfg.matcher.embed_dim
        pos_emb = np.zeros((0, dim))
        neg_emb = np.zeros((0, dim))
        if pos_states:
            pos_emb, pvalid = self.branch.embed_rois(
                acts, [s.box for s in pos_states], threads=self.threads,
                strict=False)
            pos_emb = pos_emb[pvalid]
        if neg_states:
            neg_emb, nvalid = self.branch.embed_rois(
                acts, [s.box for s in neg_states], threads=self.threads,
                strict=False)
            neg_emb = neg_emb[nvalid]
        maps = self._motion_maps_for(frame, pos_states, cfg.motion_pos_update,
                                     rng)
        maintain_memories(self.memories, t, FrameCache(pos_emb, neg_emb, maps))

    def _update_models(self, pos_indices, neg_indices, t):
        cfg = self.cfg
        updated = False
        if self.variant != "no-wcnn":
            pos = self.memories.positives(pos_indices)
            neg = self.memories.negatives(neg_indices)
            if pos.shape[0]:
                train_weighting(self.weight_head, pos, neg, cfg.weighting,
                                cfg.weighting_epochs_update,
                                rng_seed=self._seed(_RNG_WEIGHT_UPDATE, t))
                updated = True
        if self.variant != "no-men":
            maps = self.memories.motion_maps(pos_indices)
            if maps is not None:
                train_score_head(self.score_head, maps, self._labels,
                                 self._class_weights, cfg.motion_epochs_update,
                                 cfg.motion,
                                 rng_seed=self._seed(_RNG_MOTION_UPDATE, t))
                updated = True
        return updated

    def _lost_frame(self):
        """No usable candidates: keep the previous state, skip all updates."""
        self._lost_streak += 1
        return FrameResult(self.t, self.state, float("-inf"),
                           len(self.buffer), False, False, lost=True,
                           weights_zero=self.variant == "no-wcnn")


def run_tracker(frames, init_box, branch, fnet, cfg, seed, variant="full",
                threads=1, record_scores=False, record_heatmaps=False):
    """Track a whole sequence from its first-frame box.

    Returns (tracker, results, pred_boxes); pred_boxes includes the
    first frame (the given box) followed by one prediction per frame.
    """
    tracker = Tracker(branch, fnet, cfg, seed, variant, threads,
                      record_scores=record_scores,
                      record_heatmaps=record_heatmaps)
    tracker.initialize(frames[0], init_box)
    results = []
    for frame in frames[1:]:
        results.append(tracker.step(frame))
    preds = [init_box] + [r.box for r in results]
    return tracker, results, preds


def run_ablation(variants, sequences, branch, fnet, cfg, seed, threads=1):
    """Per-variant OPE metrics over shared sequences and seeds.

    sequences: list of (name, frames, gts). Returns {variant: (results,
    aggregate)} using the evaluation module's curves.
    """
    from .evaluation import run_ope

    out = {}
    for variant in variants:
        def track_fn(frames, gts, name, _variant=variant):
            _, _, preds = run_tracker(frames, gts[0], branch, fnet, cfg,
                                      seed, _variant, threads)
            return preds
        out[variant] = run_ope(track_fn, sequences)
    return out
