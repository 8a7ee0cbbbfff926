"""Forward/backward primitives on float64 numpy arrays.

All spatial tensors are row-major CHW (batched variants NCHW). Every
forward has a matching hand-written backward; there is no autodiff graph.
"""

import numpy as np


class ShapeError(ValueError):
    """A tensor dimension does not satisfy an operation's contract."""


class NormalizationError(ValueError):
    """Input vector too close to zero to normalize."""


def _as_f64(x):
    return np.ascontiguousarray(x, dtype=np.float64)


# -------------------------------------------------------------- conv2d

def _im2col(x, kh, kw, stride, pad):
    """x: (N,C,H,W) -> columns (N, C*kh*kw, OH*OW)."""
    n, c, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if pad > 0:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    s0, s1, s2, s3 = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, (n, c, kh, kw, oh, ow), (s0, s1, s2, s3, s2 * stride, s3 * stride))
    return view.reshape(n, c * kh * kw, oh * ow), oh, ow


def _col2im(gcols, xshape, kh, kw, stride, pad):
    """Scatter-add column gradients back to (N,C,H,W)."""
    n, c, h, w = xshape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    gx = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    g = gcols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += g[:, :, i, j]
    if pad > 0:
        gx = gx[:, :, pad:pad + h, pad:pad + w]
    return gx


def conv2d_forward(x, weights, bias, stride=1, pad=0):
    """2-D convolution (cross-correlation) on NCHW input.

    weights: (F, C, kh, kw), bias: (F,). Output spatial extent is
    floor((in + 2*pad - k)/stride) + 1. Returns (y, cache).
    """
    x = _as_f64(x)
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input, got ndim={x.ndim}")
    n, c, h, w = x.shape
    f, cw, kh, kw = weights.shape
    if cw != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel expects {cw}")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ShapeError(
            f"conv2d kernel {kh}x{kw} exceeds padded input {h + 2 * pad}x{w + 2 * pad}")
    cols, oh, ow = _im2col(x, kh, kw, stride, pad)
    k = cols.shape[1]
    # one big matmul beats n batched ones; flatten (N, K, P) -> (K, N*P)
    flat = cols[0] if n == 1 else cols.transpose(1, 0, 2).reshape(k, -1)
    y = weights.reshape(f, -1) @ flat + bias[:, None]
    if n == 1:
        y = y[None]
    else:
        y = y.reshape(f, n, -1).transpose(1, 0, 2)
    cache = (cols, flat, x.shape, weights, stride, pad)
    return np.ascontiguousarray(y.reshape(n, f, oh, ow)), cache


def conv2d_backward(grad_y, cache):
    """Returns (grad_x, grad_w, grad_b) for conv2d_forward."""
    cols, flat, xshape, weights, stride, pad = cache
    f = weights.shape[0]
    n = xshape[0]
    g = grad_y.reshape(n, f, -1)
    gflat = g[0] if n == 1 else g.transpose(1, 0, 2).reshape(f, -1)
    grad_w = (gflat @ flat.T).reshape(weights.shape)
    grad_b = gflat.sum(axis=1)
    gcols_flat = weights.reshape(f, -1).T @ gflat
    if n == 1:
        gcols = gcols_flat[None]
    else:
        k = cols.shape[1]
        gcols = gcols_flat.reshape(k, n, -1).transpose(1, 0, 2)
    grad_x = _col2im(gcols, xshape, weights.shape[2], weights.shape[3], stride, pad)
    return grad_x, grad_w, grad_b


def conv2d(x, params, stride=1, pad=0):
    """Single-image CHW convolution using a LayerParams holder."""
    y, _ = conv2d_forward(x[None], params.weights, params.bias, stride, pad)
    return y[0]


# ---------------------------------------------------------------- relu

def relu_forward(x):
    x = _as_f64(x)
    return np.maximum(x, 0.0), (x > 0.0)


def relu_backward(grad_y, mask):
    return grad_y * mask


def relu(x):
    """Elementwise max(0, x)."""
    return relu_forward(x)[0]


# ---------------------------------------------------------- max pooling

def max_pool2d_forward(x):
    """2x2/stride-2 max pooling on NCHW input with even spatial extents.

    Ties go to the first cell in row-major window order so the backward
    pass is deterministic. Returns (y, cache).
    """
    x = _as_f64(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2d requires even spatial extents, got {h}x{w}")
    win = (x.reshape(n, c, h // 2, 2, w // 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h // 2, w // 2, 4))
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return y, (idx, x.shape)


def max_pool2d_backward(grad_y, cache):
    idx, xshape = cache
    n, c, h, w = xshape
    gwin = np.zeros((n, c, h // 2, w // 2, 4))
    np.put_along_axis(gwin, idx[..., None], grad_y[..., None], axis=-1)
    return (gwin.reshape(n, c, h // 2, w // 2, 2, 2)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(n, c, h, w))


def max_pool2d(x):
    """Single-image CHW 2x2 max pool."""
    y, _ = max_pool2d_forward(x[None])
    return y[0]


# ------------------------------------------------------------------ lrn

def _lrn_sliding_sum(x2, radius):
    """Per-channel sum of x^2 over the channel window [c-radius, c+radius]."""
    c = x2.shape[1]
    csum = np.cumsum(x2, axis=1)
    out = np.empty_like(x2)
    for ch in range(c):
        lo = max(0, ch - radius)
        hi = min(c - 1, ch + radius)
        out[:, ch] = csum[:, hi] - (csum[:, lo - 1] if lo > 0 else 0.0)
    return out


def lrn_forward(x, depth_radius=2, alpha=1e-4, beta=0.75, k=2.0):
    """Cross-channel response normalization x_c / (k + a*sum x^2)^b on NCHW."""
    if k <= 0:
        raise ValueError("lrn requires k > 0")
    x = _as_f64(x)
    den = k + alpha * _lrn_sliding_sum(x * x, depth_radius)
    scale = den ** (-beta)
    y = x * scale
    return y, (x, den, scale, depth_radius, alpha, beta)


def lrn_backward(grad_y, cache):
    x, den, scale, radius, alpha, beta = cache
    # dy_c/dx_d = delta*scale_c - 2*a*b*x_c*x_d*den_c^(-b-1) for d in window(c)
    inner = grad_y * x * den ** (-beta - 1.0)
    acc = np.zeros_like(x)
    c = x.shape[1]
    csum = np.cumsum(inner, axis=1)
    for d in range(c):
        lo = max(0, d - radius)
        hi = min(c - 1, d + radius)
        acc[:, d] = csum[:, hi] - (csum[:, lo - 1] if lo > 0 else 0.0)
    return grad_y * scale - 2.0 * alpha * beta * x * acc


def lrn(x, depth_radius=2, alpha=1e-4, beta=0.75, k=2.0):
    """Single-image CHW local response normalization."""
    y, _ = lrn_forward(x[None], depth_radius, alpha, beta, k)
    return y[0]


# ------------------------------------------------------------- l2 norm

L2_EPS = 1e-12


def l2_normalize_forward(x):
    """Normalize rows of (N, D) (or a flat vector) to the unit sphere."""
    x = _as_f64(x)
    flat = x.ndim == 1
    v = x[None] if flat else x
    norm = np.sqrt((v * v).sum(axis=1))
    if np.any(norm < L2_EPS):
        raise NormalizationError("cannot l2-normalize a (near-)zero vector")
    y = v / norm[:, None]
    return (y[0] if flat else y), (y, norm, flat)


def l2_normalize_backward(grad_y, cache):
    y, norm, flat = cache
    g = grad_y[None] if flat else grad_y
    gx = (g - y * (g * y).sum(axis=1, keepdims=True)) / norm[:, None]
    return gx[0] if flat else gx


def l2_normalize(x):
    """x / ||x||_2; raises NormalizationError when ||x|| < 1e-12."""
    return l2_normalize_forward(x)[0]


# --------------------------------------------------------------- losses

def weighted_softmax_loss(logits, labels, class_weights):
    """Class-weighted cross entropy over (classes, N) logits.

    loss = mean_n w[y_n] * (-log softmax(logits[:, n])[y_n]). Returns
    (loss, grad) with grad the exact gradient w.r.t. logits.
    """
    logits = _as_f64(logits)
    k, n = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    w = np.asarray(class_weights, dtype=np.float64)
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError("label out of range")
    if np.any(w <= 0):
        raise ValueError("class weights must be positive")
    shifted = logits - logits.max(axis=0, keepdims=True)
    expv = np.exp(shifted)
    p = expv / expv.sum(axis=0, keepdims=True)
    cols = np.arange(n)
    wn = w[labels]
    loss = float((wn * -np.log(p[labels, cols])).mean())
    grad = p * wn[None, :]
    grad[labels, cols] -= wn
    grad /= n
    return loss, grad


def contrastive_loss(emb_a, emb_b, same, margin):
    """Margin contrastive loss on a pair of embeddings.

    0.5*c*D^2 + 0.5*(1-c)*max(0, margin - D^2) with D the euclidean
    distance. Returns (loss, grad_a, grad_b).
    """
    if margin <= 0:
        raise ValueError("margin must be positive")
    a = _as_f64(emb_a)
    b = _as_f64(emb_b)
    if a.shape != b.shape:
        raise ShapeError("contrastive_loss embeddings differ in length")
    diff = a - b
    d2 = float((diff * diff).sum())
    if same:
        return 0.5 * d2, diff, -diff
    if margin - d2 > 0:
        return 0.5 * (margin - d2), -diff, diff
    return 0.0, np.zeros_like(a), np.zeros_like(b)


def contrastive_loss_batch(emb_a, emb_b, labels, margin):
    """Mean contrastive loss over rows of (N, D) pairs.

    Returns (loss, grad_a, grad_b) with gradients of the mean.
    """
    a = _as_f64(emb_a)
    b = _as_f64(emb_b)
    c = np.asarray(labels, dtype=np.float64)
    n = a.shape[0]
    diff = a - b
    d2 = (diff * diff).sum(axis=1)
    hinge = np.maximum(0.0, margin - d2)
    loss = float((0.5 * c * d2 + 0.5 * (1.0 - c) * hinge).mean())
    coef = (c - (1.0 - c) * (hinge > 0)) / n
    ga = coef[:, None] * diff
    return loss, ga, -ga
