"""Max ROI pooling of image-coordinate boxes onto a CHW feature grid."""

import numpy as np


def roi_bin_bounds(roi_xywh, spatial_scale, height, width, bins=7):
    """Integer [start, end) cell ranges of the pooling bins.

    The roi is scaled onto the feature grid and split into bins x bins
    intervals with floor/ceil boundaries, clamped to the grid. A bin may
    be empty after clamping (start >= end).

    Returns (row_start, row_end, col_start, col_end), each (bins,) int64.
    """
    x, y, w, h = roi_xywh
    if w <= 0 or h <= 0:
        raise ValueError(f"roi must have positive size, got w={w}, h={h}")
    if spatial_scale <= 0:
        raise ValueError("spatial_scale must be positive")
    gx0 = x * spatial_scale
    gy0 = y * spatial_scale
    gw = w * spatial_scale
    gh = h * spatial_scale
    b = np.arange(bins, dtype=np.float64)
    r0 = np.clip(np.floor(gy0 + b * gh / bins), 0, height).astype(np.int64)
    r1 = np.clip(np.ceil(gy0 + (b + 1.0) * gh / bins), 0, height).astype(np.int64)
    c0 = np.clip(np.floor(gx0 + b * gw / bins), 0, width).astype(np.int64)
    c1 = np.clip(np.ceil(gx0 + (b + 1.0) * gw / bins), 0, width).astype(np.int64)
    return r0, r1, c0, c1


def roi_pool(feature, roi_xywh, spatial_scale, bins=7):
    """Pool one roi into a (C, bins, bins) grid of per-bin channel maxima.

    Empty bins (after clamping to the feature extent) are zero. A roi
    entirely outside the feature map produces an all-zero output with the
    degenerate flag set.

    Returns (pooled, degenerate).
    """
    feature = np.asarray(feature, dtype=np.float64)
    c, height, width = feature.shape
    r0, r1, c0, c1 = roi_bin_bounds(roi_xywh, spatial_scale, height, width, bins)
    out = np.zeros((c, bins, bins))
    any_filled = False
    for br in range(bins):
        if r1[br] <= r0[br]:
            continue
        for bc in range(bins):
            if c1[bc] <= c0[bc]:
                continue
            out[:, br, bc] = feature[:, r0[br]:r1[br], c0[bc]:c1[bc]].max(axis=(1, 2))
            any_filled = True
    return out, not any_filled


def roi_pool_batch(feature, rois_xywh, spatial_scale, bins=7):
    """Pool many rois off one feature map; equals per-roi roi_pool exactly.

    Row strips are reduced once per roi and reused across the column bins,
    which is the hot path for per-frame candidate scoring.

    Returns (pooled (N, C, bins, bins), degenerate (N,) bool).
    """
    feature = np.asarray(feature, dtype=np.float64)
    c, height, width = feature.shape
    rois = np.asarray(rois_xywh, dtype=np.float64)
    n = rois.shape[0]
    out = np.zeros((n, c, bins, bins))
    degenerate = np.ones(n, dtype=bool)
    strips = np.empty((bins, c, width))
    for i in range(n):
        r0, r1, c0, c1 = roi_bin_bounds(rois[i], spatial_scale, height, width, bins)
        rows_ok = r1 > r0
        for br in range(bins):
            if rows_ok[br]:
                strips[br] = feature[:, r0[br]:r1[br], :].max(axis=1)
        for bc in range(bins):
            if c1[bc] <= c0[bc]:
                continue
            colmax = strips[:, :, c0[bc]:c1[bc]].max(axis=2)
            for br in range(bins):
                if rows_ok[br]:
                    out[i, :, br, bc] = colmax[br]
                    degenerate[i] = False
    return out, degenerate


def roi_pool_backward(feature, roi_xywh, spatial_scale, grad_out, bins=7):
    """Route bin gradients to the argmax cells (first in row-major order).

    Returns a gradient array shaped like the feature map.
    """
    feature = np.asarray(feature, dtype=np.float64)
    c, height, width = feature.shape
    r0, r1, c0, c1 = roi_bin_bounds(roi_xywh, spatial_scale, height, width, bins)
    grad = np.zeros_like(feature)
    for br in range(bins):
        if r1[br] <= r0[br]:
            continue
        for bc in range(bins):
            if c1[bc] <= c0[bc]:
                continue
            patch = feature[:, r0[br]:r1[br], c0[bc]:c1[bc]]
            flat = patch.reshape(c, -1)
            idx = flat.argmax(axis=1)
            rr = idx // patch.shape[2] + r0[br]
            cc = idx % patch.shape[2] + c0[bc]
            grad[np.arange(c), rr, cc] += grad_out[:, br, bc]
    return grad


def roi_pool_backward_batch(feature, rois_xywh, spatial_scale, grad_out, bins=7):
    """Accumulated roi_pool_backward over a batch of rois."""
    grad = np.zeros_like(np.asarray(feature, dtype=np.float64))
    for i, roi in enumerate(np.asarray(rois_xywh, dtype=np.float64)):
        grad += roi_pool_backward(feature, roi, spatial_scale, grad_out[i], bins)
    return grad
