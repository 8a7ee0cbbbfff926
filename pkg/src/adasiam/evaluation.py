"""One-pass evaluation: center-error precision and overlap success curves."""

from dataclasses import dataclass, field

import numpy as np

from .geometry import iou

PRECISION_THRESHOLDS = np.arange(51, dtype=np.float64)
SUCCESS_THRESHOLDS = np.linspace(0.0, 1.0, 21)
DP_REFERENCE_PX = 20


@dataclass
class EvalResult:
    """Per-threshold curves plus their scalar summaries."""

    precision: np.ndarray
    success: np.ndarray
    dp20: float
    auc: float
    failed: bool = False
    name: str = ""
    extras: dict = field(default_factory=dict)


def center_distance(a, b):
    ax, ay = a.center
    bx, by = b.center
    return float(np.hypot(ax - bx, ay - by))


def precision_curve(pred, gt):
    """Fraction of frames whose center error is <= each pixel threshold.

    Thresholds run over 0..50 px. Returns (curve, dp20).
    """
    if len(pred) != len(gt):
        raise ValueError(f"length mismatch: {len(pred)} predictions vs "
                         f"{len(gt)} ground-truth boxes")
    dist = np.array([center_distance(p, g) for p, g in zip(pred, gt)])
    curve = (dist[None, :] <= PRECISION_THRESHOLDS[:, None]).mean(axis=1)
    return curve, float(curve[DP_REFERENCE_PX])


def success_curve(pred, gt):
    """Fraction of frames whose IoU strictly exceeds each threshold.

    Thresholds are 21 uniform samples over [0, 1]; the AUC is their mean.
    Returns (curve, auc).
    """
    if len(pred) != len(gt):
        raise ValueError(f"length mismatch: {len(pred)} predictions vs "
                         f"{len(gt)} ground-truth boxes")
    overlaps = np.array([iou(p, g) for p, g in zip(pred, gt)])
    curve = (overlaps[None, :] > SUCCESS_THRESHOLDS[:, None]).mean(axis=1)
    return curve, float(curve.mean())


def evaluate_sequence(pred, gt, name=""):
    prec, dp20 = precision_curve(pred, gt)
    succ, auc = success_curve(pred, gt)
    return EvalResult(prec, succ, dp20, auc, name=name)


def failed_result(name=""):
    """All-zero curves for a sequence whose tracker failed to initialize."""
    return EvalResult(np.zeros_like(PRECISION_THRESHOLDS),
                      np.zeros_like(SUCCESS_THRESHOLDS), 0.0, 0.0,
                      failed=True, name=name)


def aggregate_results(results):
    """Unweighted mean over sequences; order-independent."""
    if not results:
        raise ValueError("nothing to aggregate")
    prec = np.mean([r.precision for r in results], axis=0)
    succ = np.mean([r.success for r in results], axis=0)
    return EvalResult(prec, succ, float(prec[DP_REFERENCE_PX]),
                      float(succ.mean()), name="aggregate")


def run_ope(track_fn, sequences):
    """One pass per sequence, initialized from the frame-1 ground truth.

    track_fn(frames, gts, name) must return the per-frame predicted boxes
    (frame 1 included) or raise; failures score as all-zero curves with
    the failed flag set. sequences: list of (name, frames, gt_boxes).
    Returns (per-sequence results, aggregate).
    """
    results = []
    for name, frames, gts in sequences:
        try:
            pred = track_fn(frames, gts, name)
            results.append(evaluate_sequence(pred, gts, name=name))
        except Exception:
            results.append(failed_result(name=name))
    return results, aggregate_results(results)


def write_curve_csv(path, thresholds, values):
    with open(path, "w") as fh:
        fh.write("threshold,value\n")
        for t, v in zip(thresholds, values):
            fh.write(f"{float(t)!r},{float(v)!r}\n")


def write_summary(path, result):
    with open(path, "w") as fh:
        fh.write(f"DP20={result.dp20!r},AUC={result.auc!r}\n")
