import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

CACHE_DIR = Path(__file__).parent / ".cache"


def _config_fingerprint(cfg_dict, seed):
    blob = json.dumps({"cfg": cfg_dict, "seed": seed}, sort_keys=True,
                      default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@pytest.fixture(scope="session")
def desk_checkpoint():
    """Desk-scale offline training on the shipped 8-sequence corpus.

    Trains once and caches the checkpoints under tests/.cache keyed by the
    config and seeds, so repeated test runs skip the training cost. The
    measured wall time of an actual training run is stored alongside.
    """
    from adasiam.config import TrackerConfig, config_to_dict
    from adasiam.matcher import SiameseBranch, build_training_pairs, train_siamese
    from adasiam.motion import MotionFeatureNet, pretrain_feature_net
    from adasiam.nnet import load_checkpoint, save_checkpoint
    from adasiam.sequences import generate_sequence, training_corpus_specs

    seed = 1
    cfg = TrackerConfig()
    key = _config_fingerprint(config_to_dict(cfg), seed)
    cache = CACHE_DIR / f"desk-{key}"
    siamese_path = cache / "siamese.adsm1"
    fmen_path = cache / "fmen.adsm1"
    meta_path = cache / "meta.json"

    branch = SiameseBranch(cfg.matcher)
    fnet = MotionFeatureNet(cfg.motion)
    if siamese_path.exists() and fmen_path.exists() and meta_path.exists():
        branch.load_named(load_checkpoint(siamese_path))
        fnet.load_named(load_checkpoint(fmen_path))
        meta = json.loads(meta_path.read_text())
        return {"cfg": cfg, "branch": branch, "fnet": fnet,
                "train_seconds": meta["train_seconds"], "cached": True,
                "dir": cache}

    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    corpus = [generate_sequence(spec, s) for spec, s in training_corpus_specs()]
    t0 = time.time()
    fnet = MotionFeatureNet(cfg.motion, rng)
    pretrain_feature_net(fnet, corpus, cfg.training.pretrain_epochs,
                         rng_seed=np.random.SeedSequence([seed, 2]),
                         lr=cfg.training.pretrain_lr,
                         windows_per_sequence=cfg.training.pretrain_windows)
    branch = SiameseBranch(cfg.matcher, rng)
    groups = build_training_pairs(
        corpus, np.random.SeedSequence([seed, 3]),
        pairs_per_sequence=cfg.training.pairs_per_sequence,
        rois_per_pair=cfg.training.rois_per_pair,
        pos_iou=cfg.training.pair_pos_iou, neg_iou=cfg.training.pair_neg_iou)
    train_siamese(branch, groups, cfg.training.siamese_epochs,
                  global_lr=cfg.training.siamese_lr,
                  momentum=cfg.training.siamese_momentum,
                  weight_decay=cfg.training.siamese_weight_decay,
                  rng_seed=np.random.SeedSequence([seed, 4]))
    train_seconds = time.time() - t0

    cache.mkdir(parents=True, exist_ok=True)
    save_checkpoint(siamese_path, branch.named_params())
    save_checkpoint(fmen_path, fnet.named_params())
    meta_path.write_text(json.dumps({"train_seconds": train_seconds}))
    return {"cfg": cfg, "branch": branch, "fnet": fnet,
            "train_seconds": train_seconds, "cached": False, "dir": cache}
