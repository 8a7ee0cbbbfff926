"""Synthetic tracking sequences: textured targets over textured clutter.

Each sequence composites a soft-masked, textured target onto a smooth
random background following a configurable motion profile (random walk,
optional jump, occlusion, illumination ramp, scale drift) plus optional
look-alike distractors. Ground truth exists for every frame, including
occluded ones, and generation is bit-deterministic per seed. Frames are
quantized to 8-bit levels so in-memory tensors match what a PNG round
trip produces.
"""

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Box, bilinear_grid, load_groundtruth, save_groundtruth


class SequenceSpecError(ValueError):
    """The spec produced an invalid sequence (e.g. target left the frame)."""


@dataclass
class MotionSpec:
    walk_sigma: float = 2.0
    jump: tuple | None = None          # (frame_index, dx, dy), 0-based frame
    occlusion: tuple | None = None     # (start_frame, duration, coverage)
    illumination_ramp: float = 0.0     # relative gain change across the run
    scale_drift: float = 0.0           # per-frame relative size change


@dataclass
class SequenceSpec:
    length: int = 60
    image_size: int = 128
    target_size: tuple = (32, 32)
    motion: MotionSpec = field(default_factory=MotionSpec)
    distractors: int = 0
    distractor_blend: float = 0.6      # 0 = clone of the target texture
    texture_seed: int | None = None    # defaults to the generation seed

    def __post_init__(self):
        if self.length < 1:
            raise SequenceSpecError("sequence length must be >= 1")
        if min(self.target_size) < 8:
            raise SequenceSpecError("target smaller than 8 px is not trackable")
        if min(self.target_size) >= self.image_size:
            raise SequenceSpecError("target does not fit in the frame")


def _smooth_field(rng, size, cells, lo=0.0, hi=1.0):
    """Random (3, size, size) field: bilinear upsampling of coarse noise."""
    coarse = rng.uniform(lo, hi, (3, cells, cells))
    grid = (np.arange(size) + 0.5) * cells / size - 0.5
    return bilinear_grid(coarse, grid, grid)


def _texture(rng, size=64):
    base = rng.uniform(0.0, 1.0, 3)
    field_lo = _smooth_field(rng, size, 4)
    field_hi = _smooth_field(rng, size, 12)
    tex = 0.45 * base[:, None, None] + 0.3 * field_lo + 0.45 * field_hi
    return np.clip(tex, 0.02, 0.98)


def _ellipse_mask(size=64, soft=0.12):
    u = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    rr = np.sqrt(u[:, None] ** 2 + u[None, :] ** 2)
    return np.clip((1.0 - rr) / soft, 0.0, 1.0)


def _paint(frame, box, texture, mask, gain=1.0):
    """Alpha-composite a textured box onto the frame in place."""
    _, fh, fw = frame.shape
    x0 = max(0, int(np.floor(box.x)))
    x1 = min(fw, int(np.ceil(box.x + box.w)))
    y0 = max(0, int(np.floor(box.y)))
    y1 = min(fh, int(np.ceil(box.y + box.h)))
    if x1 <= x0 or y1 <= y0:
        return
    th, tw = texture.shape[1], texture.shape[2]
    sx = (np.arange(x0, x1) + 0.5 - box.x) / box.w * tw - 0.5
    sy = (np.arange(y0, y1) + 0.5 - box.y) / box.h * th - 0.5
    tex = bilinear_grid(texture, sy, sx) * gain
    alpha = bilinear_grid(mask[None], sy, sx)[0]
    region = frame[:, y0:y1, x0:x1]
    frame[:, y0:y1, x0:x1] = region * (1.0 - alpha) + tex * alpha


def _reflect(value, lo, hi):
    span = hi - lo
    if span <= 0:
        return lo
    v = (value - lo) % (2.0 * span)
    return lo + (v if v <= span else 2.0 * span - v)


def generate_sequence(spec, seed):
    """Render a sequence. Returns (frames, gt_boxes).

    frames: list of (3, H, W) float64 arrays in [0, 1] at 8-bit levels.
    Deterministic: the same (spec, seed) yields bit-identical tensors.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA5]))
    tex_rng = np.random.default_rng(
        np.random.SeedSequence([spec.texture_seed if spec.texture_seed is not None
                                else seed, 0x7E]))
    size = spec.image_size
    w0, h0 = float(spec.target_size[0]), float(spec.target_size[1])
    motion = spec.motion

    background = np.clip(0.65 * _smooth_field(tex_rng, size, 5)
                         + 0.45 * _smooth_field(tex_rng, size, 16), 0.02, 0.98)
    target_tex = _texture(tex_rng)
    occluder_tex = np.clip(0.5 * _smooth_field(tex_rng, 64, 5)
                           + 0.5 * _smooth_field(tex_rng, 64, 16), 0.02, 0.98)
    mask = _ellipse_mask()

    distractor_texes = []
    for _ in range(spec.distractors):
        alt = _texture(tex_rng)
        blend = spec.distractor_blend
        distractor_texes.append(np.clip(
            (1.0 - blend) * target_tex + blend * alt, 0.02, 0.98))

    margin = max(w0, h0) / 2.0 + 3.0
    lo, hi = margin, size - margin
    cx = float(rng.uniform(lo, hi))
    cy = float(rng.uniform(lo, hi))
    scale = 1.0

    dist_pos = []
    for _ in range(spec.distractors):
        dist_pos.append([float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi))])

    frames = []
    gts = []
    for t in range(spec.length):
        if t > 0:
            step = rng.normal(0.0, motion.walk_sigma, size=2)
            cx = _reflect(cx + step[0], lo, hi)
            cy = _reflect(cy + step[1], lo, hi)
            if motion.jump is not None and t == motion.jump[0]:
                cx += motion.jump[1]
                cy += motion.jump[2]
            scale = float(np.clip(scale * (1.0 + motion.scale_drift), 0.5, 2.0))
        w = w0 * scale
        h = h0 * scale
        gt = Box(cx - w / 2.0, cy - h / 2.0, w, h)
        if gt.x + gt.w <= 0 or gt.y + gt.h <= 0 or gt.x >= size or gt.y >= size:
            raise SequenceSpecError(
                f"target left the frame at t={t}: {gt} outside {size}x{size}")

        frame = background.copy()

        for di in range(spec.distractors):
            dstep = rng.normal(0.0, motion.walk_sigma, size=2)
            px = _reflect(dist_pos[di][0] + dstep[0], lo, hi)
            py = _reflect(dist_pos[di][1] + dstep[1], lo, hi)
            # keep distractors off the target so the ground truth stays clean
            gap = max(w0, h0) * 1.2
            dx, dy = px - cx, py - cy
            d = float(np.hypot(dx, dy))
            if d < gap:
                if d < 1e-6:
                    dx, dy, d = gap, 0.0, gap
                px = _reflect(cx + dx / d * gap, lo, hi)
                py = _reflect(cy + dy / d * gap, lo, hi)
            dist_pos[di] = [px, py]
            dbox = Box(px - w0 / 2.0, py - h0 / 2.0, w0, h0)
            _paint(frame, dbox, distractor_texes[di], mask)

        gain = 1.0
        if motion.illumination_ramp and spec.length > 1:
            gain = 1.0 + motion.illumination_ramp * t / (spec.length - 1)
        _paint(frame, gt, target_tex, mask, gain=gain)

        if motion.occlusion is not None:
            start, duration, coverage = motion.occlusion
            if start <= t < start + duration:
                ow = w * np.sqrt(coverage)
                oh = h * np.sqrt(coverage)
                obox = Box(cx - ow / 2.0, cy - oh / 2.0, ow, oh)
                _paint(frame, obox, occluder_tex, np.ones((64, 64)))

        frame = np.round(np.clip(frame, 0.0, 1.0) * 255.0) / 255.0
        frames.append(frame)
        gts.append(gt)
    return frames, gts


# ------------------------------------------------------------ persistence

def save_sequence(dirpath, frames, gts):
    """Numbered PNG frames plus an 'x,y,w,h' ground-truth text file."""
    path = Path(dirpath)
    path.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(frames):
        arr = np.round(frame * 255.0).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(arr).save(path / f"{i + 1:04d}.png")
    save_groundtruth(path / "groundtruth.txt", gts)


def load_sequence(dirpath):
    path = Path(dirpath)
    files = sorted(p for p in path.iterdir()
                   if re.fullmatch(r"\d+\.png", p.name))
    if not files:
        raise FileNotFoundError(f"no numbered .png frames in {path}")
    frames = []
    for f in files:
        arr = np.asarray(Image.open(f), dtype=np.float64) / 255.0
        frames.append(arr.transpose(2, 0, 1))
    gts = load_groundtruth(path / "groundtruth.txt")
    return frames, gts


# ------------------------------------------------------- shipped suites

TRAIN_SEED_BASE = 1000
SMOOTH_SEED_BASE = 5000
JUMP_SEED_BASE = 6000
OCCLUSION_SEED_BASE = 7000
DISTRACTOR_SEED_BASE = 8000


def training_corpus_specs(count=8, length=30):
    """Offline-training sequences; seeds disjoint from every eval suite."""
    out = []
    for i in range(count):
        motion = MotionSpec(walk_sigma=2.5,
                            illumination_ramp=0.25 if i % 2 else 0.0,
                            scale_drift=0.004 if i % 3 == 0 else 0.0)
        spec = SequenceSpec(length=length, motion=motion,
                            distractors=1 if i % 4 == 3 else 0)
        out.append((spec, TRAIN_SEED_BASE + i))
    return out


def smooth_suite(count=4, length=60):
    """Held-out easy sequences for the tracking-quality gate."""
    out = []
    for i in range(count):
        spec = SequenceSpec(length=length, motion=MotionSpec(walk_sigma=2.0))
        out.append((spec, SMOOTH_SEED_BASE + i))
    return out


def jump_sequence(index, length=30):
    """Abrupt displacement mid-sequence; defeats local-only sampling."""
    rng = np.random.default_rng(JUMP_SEED_BASE + index)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    dist = 40.0
    motion = MotionSpec(walk_sigma=1.5,
                        jump=(length // 2, dist * np.cos(angle),
                              dist * np.sin(angle)))
    return SequenceSpec(length=length, motion=motion), JUMP_SEED_BASE + index


def occlusion_sequence(index, length=40):
    """Heavy mid-sequence occlusion over a slow appearance drift."""
    motion = MotionSpec(walk_sigma=1.5,
                        occlusion=(16, 8, 0.9),
                        illumination_ramp=0.45)
    return SequenceSpec(length=length, motion=motion), OCCLUSION_SEED_BASE + index


def distractor_sequence(index, length=40):
    """Two look-alike objects sharing most of the target's texture."""
    motion = MotionSpec(walk_sigma=1.5)
    spec = SequenceSpec(length=length, motion=motion, distractors=2,
                        distractor_blend=0.35)
    return spec, DISTRACTOR_SEED_BASE + index


# ------------------------------------------------------------ spec files

_MOTION_KEYS = {"walk_sigma", "jump", "occlusion", "illumination_ramp",
                "scale_drift"}
_SPEC_KEYS = {"length", "image_size", "target_size", "motion", "distractors",
              "distractor_blend", "texture_seed"}


def spec_from_dict(data):
    """Build a SequenceSpec from parsed YAML, rejecting unknown keys."""
    unknown = set(data) - _SPEC_KEYS
    if unknown:
        raise SequenceSpecError(f"unknown sequence spec keys: {sorted(unknown)}")
    kwargs = dict(data)
    motion_data = kwargs.pop("motion", {}) or {}
    unknown = set(motion_data) - _MOTION_KEYS
    if unknown:
        raise SequenceSpecError(f"unknown motion keys: {sorted(unknown)}")
    for key in ("jump", "occlusion"):
        if motion_data.get(key) is not None:
            motion_data[key] = tuple(motion_data[key])
    if "target_size" in kwargs:
        kwargs["target_size"] = tuple(kwargs["target_size"])
    return SequenceSpec(motion=MotionSpec(**motion_data), **kwargs)
