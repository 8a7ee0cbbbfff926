"""Command-line entry point: synth, train, track, eval subcommands.

Exit codes: 0 when all outputs were written, 2 for usage/config errors,
1 for runtime failures.
"""

import argparse
import sys
from pathlib import Path

import numpy as np
import yaml

from .config import ConfigError, TrackerConfig, config_to_dict, load_config
from .evaluation import (
    PRECISION_THRESHOLDS,
    SUCCESS_THRESHOLDS,
    aggregate_results,
    evaluate_sequence,
    write_curve_csv,
    write_summary,
)
from .geometry import Box, load_groundtruth
from .manifest import write_manifest
from .matcher import SiameseBranch, train_siamese, build_training_pairs
from .motion import MotionFeatureNet, pretrain_feature_net
from .nnet.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .sequences import (
    SequenceSpecError,
    generate_sequence,
    load_sequence,
    save_sequence,
    spec_from_dict,
)
from .tracking import VARIANTS, run_tracker


class UsageError(ValueError):
    """Bad arguments, missing files, or incompatible inputs."""


def _load_yaml(path):
    try:
        with open(path) as fh:
            return yaml.safe_load(fh)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc
    except yaml.YAMLError as exc:
        raise UsageError(f"{path}: invalid YAML ({exc})") from exc


def _config(args):
    if args.config:
        return load_config(args.config)
    return TrackerConfig()


def _ensure_outdir(path):
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"output directory {out} is not writable: {exc}")
    return out


# ----------------------------------------------------------------- synth

def cmd_synth(args):
    data = _load_yaml(args.spec)
    if not isinstance(data, dict):
        raise UsageError(f"{args.spec}: sequence spec must be a mapping")
    spec = spec_from_dict(data)
    out = _ensure_outdir(args.out)
    frames, gts = generate_sequence(spec, args.seed)
    save_sequence(out, frames, gts)
    write_manifest(out, "synth", args.seed,
                   {"spec": str(args.spec), "spec_data": data},
                   {"frames": len(frames), "dir": str(out)})
    print(f"wrote {len(frames)} frames to {out}")


# ----------------------------------------------------------------- train

def _load_corpus(corpus_dir):
    root = Path(corpus_dir)
    if not root.is_dir():
        raise UsageError(f"corpus directory {root} does not exist")
    seq_dirs = sorted(p for p in root.iterdir()
                      if p.is_dir() and (p / "groundtruth.txt").exists())
    if not seq_dirs:
        raise UsageError(f"corpus directory {root} holds no sequences")
    return [(load_sequence(p)) for p in seq_dirs], [p.name for p in seq_dirs]


def _write_loss_csv(path, losses):
    with open(path, "w") as fh:
        fh.write("epoch,loss\n")
        for i, loss in enumerate(losses, start=1):
            fh.write(f"{i},{loss!r}\n")


def cmd_train(args):
    cfg = _config(args)
    corpus, names = _load_corpus(args.corpus)
    out = _ensure_outdir(args.out)
    tcfg = cfg.training
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 1]))

    fnet = MotionFeatureNet(cfg.motion, rng)
    fmen_losses = pretrain_feature_net(
        fnet, corpus, tcfg.pretrain_epochs,
        rng_seed=np.random.SeedSequence([args.seed, 2]),
        lr=tcfg.pretrain_lr, windows_per_sequence=tcfg.pretrain_windows)

    branch = SiameseBranch(cfg.matcher, rng)
    groups = build_training_pairs(
        corpus, np.random.SeedSequence([args.seed, 3]),
        pairs_per_sequence=tcfg.pairs_per_sequence,
        rois_per_pair=tcfg.rois_per_pair,
        pos_iou=tcfg.pair_pos_iou, neg_iou=tcfg.pair_neg_iou)
    siamese_losses = train_siamese(
        branch, groups, tcfg.siamese_epochs, global_lr=tcfg.siamese_lr,
        momentum=tcfg.siamese_momentum, weight_decay=tcfg.siamese_weight_decay,
        rng_seed=np.random.SeedSequence([args.seed, 4]))

    save_checkpoint(out / "siamese.adsm1", branch.named_params())
    save_checkpoint(out / "fmen.adsm1", fnet.named_params())
    _write_loss_csv(out / "loss_siamese.csv", siamese_losses)
    _write_loss_csv(out / "loss_fmen.csv", fmen_losses)
    write_manifest(out, "train", args.seed,
                   {"corpus": str(args.corpus), "sequences": names},
                   {"siamese": "siamese.adsm1", "fmen": "fmen.adsm1",
                    "loss_siamese": "loss_siamese.csv",
                    "loss_fmen": "loss_fmen.csv"},
                   config_path=args.config, config_snapshot=config_to_dict(cfg))
    print(f"trained on {len(corpus)} sequences; final pair loss "
          f"{siamese_losses[-1]:.4f}; checkpoints in {out}")


# ----------------------------------------------------------------- track

def load_nets(checkpoint_dir, cfg):
    """Build the matcher branch and motion feature net from a checkpoint
    directory; shape mismatches name the offending field."""
    ckpt = Path(checkpoint_dir)
    siamese_path = ckpt / "siamese.adsm1"
    fmen_path = ckpt / "fmen.adsm1"
    for p in (siamese_path, fmen_path):
        if not p.exists():
            raise UsageError(f"checkpoint file {p} not found")
    branch = SiameseBranch(cfg.matcher)
    fnet = MotionFeatureNet(cfg.motion)
    try:
        branch.load_named(load_checkpoint(siamese_path))
        fnet.load_named(load_checkpoint(fmen_path))
    except (KeyError, ValueError) as exc:
        raise UsageError(f"checkpoint/config mismatch: {exc}") from exc
    return branch, fnet


def write_track_csv(path, results):
    with open(path, "w") as fh:
        fh.write("frame,x,y,w,h,score,buffer_size,updated_short,updated_long\n")
        for r in results:
            b = r.box
            fh.write(f"{r.t},{b.x!r},{b.y!r},{b.w!r},{b.h!r},{r.score!r},"
                     f"{r.buffer_size},{int(r.updated_short)},"
                     f"{int(r.updated_long)}\n")


def _write_scores_csv(path, records):
    with open(path, "w") as fh:
        fh.write("frame,candidate,sim,weight,fused\n")
        for rec in records:
            w = np.broadcast_to(rec.weights, rec.sims.shape)
            for i in range(rec.sims.shape[0]):
                fh.write(f"{rec.t},{i},{float(rec.sims[i])!r},"
                         f"{float(w[i])!r},{float(rec.fused[i])!r}\n")


def cmd_track(args):
    cfg = _config(args)
    branch, fnet = load_nets(args.checkpoint, cfg)
    seq_dir = Path(args.sequence)
    try:
        frames, gts = load_sequence(seq_dir)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc
    out = _ensure_outdir(args.out)

    tracker, results, preds = run_tracker(
        frames, gts[0], branch, fnet, cfg, args.seed, variant=args.ablate,
        threads=args.threads, record_scores=args.scores,
        record_heatmaps=args.heatmaps)

    csv_path = out / "track.csv"
    write_track_csv(csv_path, results)
    outputs = {"track_csv": "track.csv"}

    if args.scores:
        _write_scores_csv(out / "scores.csv", tracker.score_records)
        outputs["scores_csv"] = "scores.csv"
    if args.overlay:
        from .plotting import save_overlay
        overlay_dir = out / "overlays"
        overlay_dir.mkdir(exist_ok=True)
        for r in results:
            gt = gts[r.t - 1] if r.t - 1 < len(gts) else None
            save_overlay(frames[r.t - 1], r.box, gt,
                         overlay_dir / f"frame_{r.t:04d}.png")
        outputs["overlays"] = "overlays/"
    if args.heatmaps:
        from .plotting import save_heatmap
        heat_dir = out / "heatmaps"
        heat_dir.mkdir(exist_ok=True)
        for t, positive, _window in tracker.heatmaps:
            np.savetxt(heat_dir / f"frame_{t:04d}.csv", positive,
                       delimiter=",")
            save_heatmap(positive, heat_dir / f"frame_{t:04d}.png")
        outputs["heatmaps"] = "heatmaps/"

    write_manifest(out, "track", args.seed,
                   {"sequence": str(seq_dir), "checkpoint": str(args.checkpoint),
                    "ablate": args.ablate, "threads": args.threads},
                   outputs, config_path=args.config,
                   config_snapshot=config_to_dict(cfg))
    print(f"tracked {len(results)} frames -> {csv_path}")


# ------------------------------------------------------------------ eval

def read_track_csv(path):
    """Per-frame predicted boxes (and scores) from a track.csv."""
    boxes = []
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header[:5] != ["frame", "x", "y", "w", "h"]:
            raise UsageError(f"{path}: unexpected track.csv header")
        for line in fh:
            parts = line.strip().split(",")
            if not parts or parts == [""]:
                continue
            boxes.append(Box(float(parts[1]), float(parts[2]),
                             float(parts[3]), float(parts[4])))
    return boxes


def _collect_eval_pairs(pred_root, gt_root):
    pred_root = Path(pred_root)
    gt_root = Path(gt_root)
    if (pred_root / "track.csv").exists():
        gt_file = (gt_root / "groundtruth.txt" if gt_root.is_dir()
                   else gt_root)
        if not gt_file.exists():
            raise UsageError(f"missing ground truth {gt_file}")
        return [(pred_root.name, pred_root / "track.csv", gt_file)]
    pairs = []
    for sub in sorted(p for p in pred_root.iterdir() if p.is_dir()):
        csv = sub / "track.csv"
        if not csv.exists():
            continue
        gt_file = gt_root / sub.name / "groundtruth.txt"
        if not gt_file.exists():
            raise UsageError(f"missing ground truth for sequence {sub.name!r}: "
                             f"{gt_file}")
        pairs.append((sub.name, csv, gt_file))
    if not pairs:
        raise UsageError(f"no track.csv files under {pred_root}")
    return pairs


def cmd_eval(args):
    pairs = _collect_eval_pairs(args.pred, args.gt)
    out = _ensure_outdir(args.out)
    results = []
    for name, csv_path, gt_path in pairs:
        gts = load_groundtruth(gt_path)
        preds = [gts[0]] + read_track_csv(csv_path)
        if len(preds) != len(gts):
            raise UsageError(
                f"{name}: {len(preds)} predictions (incl. init frame) vs "
                f"{len(gts)} ground-truth boxes")
        results.append(evaluate_sequence(preds, gts, name=name))
    agg = aggregate_results(results)

    for r in results + [agg]:
        write_curve_csv(out / f"precision_{r.name}.csv",
                        PRECISION_THRESHOLDS, r.precision)
        write_curve_csv(out / f"success_{r.name}.csv",
                        SUCCESS_THRESHOLDS, r.success)
        write_summary(out / f"summary_{r.name}.txt", r)

    from .plotting import save_precision_plot, save_success_plot
    save_precision_plot({r.name: (r.precision, r.dp20)
                         for r in results + [agg]}, out / "precision.png")
    save_success_plot({r.name: (r.success, r.auc)
                       for r in results + [agg]}, out / "success.png")

    write_manifest(out, "eval", args.seed,
                   {"pred": str(args.pred), "gt": str(args.gt),
                    "sequences": [name for name, _, _ in pairs]},
                   {"aggregate_dp20": agg.dp20, "aggregate_auc": agg.auc})
    print(f"aggregate DP20={agg.dp20:.4f} AUC={agg.auc:.4f} -> {out}")


# ------------------------------------------------------------------ main

def build_parser():
    parser = argparse.ArgumentParser(
        prog="adasiam",
        description="Adaptive Siamese tracker: synthetic data, training, "
                    "tracking, and OPE evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master RNG seed")
    common.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("synth", parents=[common],
                       help="generate a synthetic sequence")
    p.add_argument("--spec", required=True, help="sequence spec YAML")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common],
                       help="offline-train the matcher and motion nets")
    p.add_argument("--config", default=None, help="tracker config YAML")
    p.add_argument("--corpus", required=True, help="directory of sequences")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("track", parents=[common],
                       help="run the tracker over a sequence")
    p.add_argument("--config", default=None, help="tracker config YAML")
    p.add_argument("--checkpoint", required=True,
                   help="directory holding siamese.adsm1 and fmen.adsm1")
    p.add_argument("--sequence", required=True, help="sequence directory")
    p.add_argument("--ablate", default="full", choices=VARIANTS,
                   help="tracker variant")
    p.add_argument("--overlay", action="store_true",
                   help="write box-overlay images")
    p.add_argument("--scores", action="store_true",
                   help="write per-candidate score CSV")
    p.add_argument("--heatmaps", action="store_true",
                   help="write score-map CSVs and images")
    p.add_argument("--threads", type=int, default=1,
                   help="candidate-scoring parallelism")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", parents=[common],
                       help="score predictions against ground truth")
    p.add_argument("--pred", required=True,
                   help="run directory (or directory of run directories)")
    p.add_argument("--gt", required=True,
                   help="sequence directory (or directory of sequences)")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (UsageError, ConfigError, SequenceSpecError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
