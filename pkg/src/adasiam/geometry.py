"""Boxes, IoU, Gaussian candidate sampling, patch extraction, labeling."""

from dataclasses import dataclass, replace

import numpy as np

LABEL_POS = 1
LABEL_NEG = -1
LABEL_IGNORE = 0


class PatchError(ValueError):
    """Requested patch does not overlap the image."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned pixel box: top-left corner plus positive size."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("x", "y", "w", "h"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box size must be positive, got w={self.w}, h={self.h}")

    @property
    def center(self):
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    def as_array(self):
        return np.array([self.x, self.y, self.w, self.h])


@dataclass(frozen=True)
class BoxState:
    """Target state: center, scale multiplier, and the initial target size.

    The derived pixel box has size (s*w0, s*h0), which keeps the initial
    aspect ratio fixed for the whole sequence.
    """

    l_x: float
    l_y: float
    s: float
    w0: float
    h0: float

    def __post_init__(self):
        for name in ("l_x", "l_y", "s", "w0", "h0"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if self.s <= 0:
            raise ValueError("scale must be positive")

    @property
    def box(self):
        w = self.s * self.w0
        h = self.s * self.h0
        return Box(self.l_x - w / 2.0, self.l_y - h / 2.0, w, h)

    @classmethod
    def from_box(cls, box, w0=None, h0=None):
        w0 = box.w if w0 is None else w0
        h0 = box.h if h0 is None else h0
        cx, cy = box.center
        return cls(cx, cy, box.w / w0, w0, h0)

    def moved_to(self, l_x, l_y):
        return replace(self, l_x=l_x, l_y=l_y)


@dataclass
class SamplerConfig:
    """Gaussian candidate generation around one or two center states."""

    n_candidates: int = 256
    sigma_xy_factor: float = 0.09   # variance of x,y is this factor times v^2
    sigma_s2: float = 0.25          # variance of the geometric scale exponent
    scale_step: float = 1.1
    split_ratio: float = 0.5        # fraction drawn around the first center
    s_min: float = 0.2
    s_max: float = 5.0

    def __post_init__(self):
        if not 0.0 <= self.split_ratio <= 1.0:
            raise ValueError("split_ratio must lie in [0, 1]")
        if self.n_candidates <= 0:
            raise ValueError("n_candidates must be positive")


def iou(a, b):
    """Intersection-over-union of two boxes, in [0, 1]."""
    ix = max(0.0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    iy = max(0.0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = ix * iy
    union = a.w * a.h + b.w * b.h - inter
    return inter / union


def _draw_around(center, count, cfg, rng):
    v = (center.box.w + center.box.h) / 2.0
    sigma_xy = np.sqrt(cfg.sigma_xy_factor) * v
    noise = rng.normal(0.0, 1.0, (count, 3))
    lx = center.l_x + sigma_xy * noise[:, 0]
    ly = center.l_y + sigma_xy * noise[:, 1]
    g = np.sqrt(cfg.sigma_s2) * noise[:, 2]
    s = np.clip(center.s * cfg.scale_step ** g, cfg.s_min, cfg.s_max)
    return [BoxState(lx[i], ly[i], s[i], center.w0, center.h0)
            for i in range(count)]


def sample_candidates(centers, cfg, rng_seed):
    """Draw candidate states from per-center Gaussians.

    centers is one or two BoxStates. With two, ceil(split_ratio * n) are
    drawn around the first (the motion-estimate center) and the rest
    around the second. Positions use variance sigma_xy_factor * v^2 with v
    the mean of the center's box width and height; scale multiplies by
    scale_step**g with g ~ N(0, sigma_s2), clamped to [s_min, s_max].
    Deterministic for a given seed.
    """
    if not centers:
        raise ValueError("at least one center required")
    if len(centers) > 2:
        raise ValueError("at most two centers supported")
    rng = np.random.default_rng(rng_seed)
    n = cfg.n_candidates
    if len(centers) == 1:
        return _draw_around(centers[0], n, cfg, rng)
    first = int(np.ceil(cfg.split_ratio * n))
    out = _draw_around(centers[0], first, cfg, rng)
    out.extend(_draw_around(centers[1], n - first, cfg, rng))
    return out


def label_by_iou(candidates, gt, pos_thresh, neg_thresh):
    """Partition boxes into positive / negative / ignore by IoU with gt."""
    if not 0.0 <= neg_thresh <= pos_thresh <= 1.0:
        raise ValueError("need 0 <= neg_thresh <= pos_thresh <= 1")
    labels = np.empty(len(candidates), dtype=np.int64)
    for i, cand in enumerate(candidates):
        ov = iou(cand, gt)
        if ov > pos_thresh:
            labels[i] = LABEL_POS
        elif ov < neg_thresh:
            labels[i] = LABEL_NEG
        else:
            labels[i] = LABEL_IGNORE
    return labels


def bilinear_grid(image, sy, sx):
    """Sample a CHW image on the grid sy x sx with edge replication.

    sy, sx are 1-D arrays of source coordinates on the pixel-center
    convention (pixel i has center i). Returns (C, len(sy), len(sx)).
    """
    image = np.asarray(image, dtype=np.float64)
    _, h, w = image.shape
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = sx - x0
    fy = sy - y0
    x0i = np.clip(x0.astype(np.int64), 0, w - 1)
    x1i = np.clip(x0.astype(np.int64) + 1, 0, w - 1)
    y0i = np.clip(y0.astype(np.int64), 0, h - 1)
    y1i = np.clip(y0.astype(np.int64) + 1, 0, h - 1)
    ia = image[:, y0i[:, None], x0i[None, :]]
    ib = image[:, y0i[:, None], x1i[None, :]]
    ic = image[:, y1i[:, None], x0i[None, :]]
    idd = image[:, y1i[:, None], x1i[None, :]]
    fx = fx[None, None, :]
    fy = fy[None, :, None]
    return (ia * (1 - fx) * (1 - fy) + ib * fx * (1 - fy)
            + ic * (1 - fx) * fy + idd * fx * fy)


def extract_patch(image, box, out_size):
    """Crop a box from a CHW image and bilinearly resize to out_size (H, W).

    Out-of-frame samples replicate the nearest edge pixel. Raises
    PatchError when the box does not overlap the image at all.
    """
    image = np.asarray(image, dtype=np.float64)
    _, h, w = image.shape
    if box.x + box.w <= 0 or box.y + box.h <= 0 or box.x >= w or box.y >= h:
        raise PatchError(f"box {box} does not overlap a {w}x{h} image")
    oh, ow = out_size
    sx = box.x + (np.arange(ow) + 0.5) * box.w / ow - 0.5
    sy = box.y + (np.arange(oh) + 0.5) * box.h / oh - 0.5
    return bilinear_grid(image, sy, sx)


def cosine_window(h, w):
    """Outer product of 1-D Hann windows; peak 1 at the center for odd sizes."""
    if h < 1 or w < 1:
        raise ValueError("window size must be >= 1")
    return np.outer(np.hanning(h), np.hanning(w))


def save_groundtruth(path, boxes):
    """One 'x,y,w,h' line per frame."""
    with open(path, "w") as fh:
        for b in boxes:
            fh.write(f"{b.x!r},{b.y!r},{b.w!r},{b.h!r}\n")


def load_groundtruth(path):
    boxes = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            x, y, w, h = (float(v) for v in line.split(","))
            boxes.append(Box(x, y, w, h))
    return boxes
