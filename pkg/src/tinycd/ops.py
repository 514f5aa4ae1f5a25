"""Differentiable operations on N x C x H x W tensors.

Convolutions run as batched matrix products over an im2col layout; everything
else is element-wise or a small einsum.  Each op validates its preconditions,
computes the forward with plain numpy, and registers a closure producing the
parent gradients.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, ShapeError, ValidationError
from .tensor import Tensor, _node


def _require_4d(t: Tensor, role: str) -> None:
    if t.data.ndim != 4:
        raise ShapeError(f"{role} must be 4-D (N, C, H, W), got shape {t.shape}")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv2d(
    input: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """Grouped 2-D cross-correlation.

    ``weight`` has shape (C_out, C_in/groups, k_h, k_w); output spatial dims are
    floor((H + 2*padding - k) / stride) + 1.
    """
    _require_4d(input, "conv2d input")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d weight must be 4-D, got shape {weight.shape}")
    if stride < 1:
        raise ConfigurationError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ConfigurationError(f"padding must be >= 0, got {padding}")

    n, c_in, h, w = input.shape
    c_out, c_group, kh, kw = weight.shape
    if groups < 1 or c_in % groups or c_out % groups:
        raise ConfigurationError(
            f"groups={groups} must divide both in_channels={c_in} and out_channels={c_out}"
        )
    if c_group != c_in // groups:
        raise ShapeError(
            f"weight axis 1 is {c_group} but in_channels/groups = {c_in}//{groups} = {c_in // groups}"
        )
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"bias must have shape ({c_out},), got {bias.shape}")

    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(
            f"kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding} (axes 2, 3)"
        )

    x = input.data
    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0
    if pointwise:
        cols = x.reshape(n, groups, c_group, h * w)
    else:
        cols = _im2col(x, kh, kw, stride, padding, groups, h_out, w_out)
    wg = weight.data.reshape(groups, c_out // groups, c_group * kh * kw)
    out = np.matmul(wg[None], cols).reshape(n, c_out, h_out, w_out)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    parents = (input, weight) if bias is None else (input, weight, bias)
    need_x = input.requires_grad
    need_w = weight.requires_grad

    def backward(g: np.ndarray):
        gm = g.reshape(n, groups, c_out // groups, h_out * w_out)
        gw = None
        if need_w:
            gw = np.matmul(gm, cols.transpose(0, 1, 3, 2)).sum(axis=0).reshape(weight.shape)
        gx = None
        if need_x:
            if pointwise:
                gx = np.matmul(wg.transpose(0, 2, 1)[None], gm).reshape(n, c_in, h, w)
            elif groups > 1 and padding <= min(kh, kw) - 1:
                # grouped kernels have tiny per-group matrices; correlating the
                # (dilated) output gradient with flipped kernels is much faster
                gx = _grad_input_flip(g, weight.data, (n, c_in, h, w), stride, padding, groups)
            else:
                gx = _grad_input_scatter(g, gm, wg, (n, c_in, h, w), kh, kw, stride, padding, groups)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _node(out, parents, backward)


def _pad2d(x: np.ndarray, top: int, left: int, bottom: int, right: int) -> np.ndarray:
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + top + bottom, w + left + right), dtype=x.dtype)
    out[:, :, top : top + h, left : left + w] = x
    return out


def _im2col(x, kh, kw, stride, padding, groups, h_out, w_out) -> np.ndarray:
    n, c_in = x.shape[:2]
    xp = _pad2d(x, padding, padding, padding, padding) if padding else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    return (
        win.reshape(n, groups, c_in // groups, h_out, w_out, kh, kw)
        .transpose(0, 1, 2, 5, 6, 3, 4)
        .reshape(n, groups, (c_in // groups) * kh * kw, h_out * w_out)
    )


def _grad_input_scatter(g, gm, wg, x_shape, kh, kw, stride, padding, groups):
    """Input gradient by scattering the per-window gradients back onto the padded grid."""
    n, c_in, h, w = x_shape
    h_out, w_out = g.shape[2], g.shape[3]
    c_group = c_in // groups
    gcols = np.matmul(wg.transpose(0, 2, 1)[None], gm)
    gwin = (
        gcols.reshape(n, groups, c_group, kh, kw, h_out, w_out)
        .transpose(0, 1, 2, 5, 6, 3, 4)
        .reshape(n, c_in, h_out, w_out, kh, kw)
    )
    gx_pad = np.zeros((n, c_in, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
    for u in range(kh):
        for v in range(kw):
            gx_pad[:, :, u : u + stride * h_out : stride, v : v + stride * w_out : stride] += gwin[
                :, :, :, :, u, v
            ]
    return gx_pad[:, :, padding : padding + h, padding : padding + w] if padding else gx_pad


def _grad_input_flip(g, w, x_shape, stride, padding, groups):
    """Input gradient as a correlation of the dilated output gradient with flipped kernels.

    Requires padding <= k - 1 on both axes (the caller falls back to the
    scatter path otherwise).
    """
    n, c_in, h, wd = x_shape
    c_out, c_group, kh, kw = w.shape
    h_out, w_out = g.shape[2], g.shape[3]
    if stride > 1:
        gd = np.zeros((n, c_out, (h_out - 1) * stride + 1, (w_out - 1) * stride + 1), dtype=g.dtype)
        gd[:, :, ::stride, ::stride] = g
    else:
        gd = g
    pad_h = kh - 1 - padding
    pad_w = kw - 1 - padding
    extra_h = (h + 2 * padding - kh) - (h_out - 1) * stride
    extra_w = (wd + 2 * padding - kw) - (w_out - 1) * stride
    gp = _pad2d(gd, pad_h, pad_w, pad_h + extra_h, pad_w + extra_w)
    win = sliding_window_view(gp, (kh, kw), axis=(2, 3))
    c_og = c_out // groups
    colm = (
        win.reshape(n, groups, c_og, h, wd, kh, kw)
        .transpose(0, 1, 2, 5, 6, 3, 4)
        .reshape(n, groups, c_og * kh * kw, h * wd)
    )
    wf = np.ascontiguousarray(
        w[:, :, ::-1, ::-1].reshape(groups, c_og, c_group, kh, kw).transpose(0, 2, 1, 3, 4)
    ).reshape(groups, c_group, c_og * kh * kw)
    return np.matmul(wf[None], colm).reshape(n, c_in, h, wd)


def depthwise_separable_conv(
    input: Tensor,
    depthwise_weight: Tensor,
    pointwise_weight: Tensor,
    bias: Optional[Tensor] = None,
) -> Tensor:
    """Per-channel k x k convolution followed by a 1 x 1 channel mix; spatial shape preserved."""
    c_in = input.shape[1]
    kh = depthwise_weight.shape[2]
    spatial = conv2d(input, depthwise_weight, stride=1, padding=kh // 2, groups=c_in)
    return conv2d(spatial, pointwise_weight, bias)


# ---------------------------------------------------------------------------
# normalization / activations
# ---------------------------------------------------------------------------


def instance_norm(input: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize each (sample, channel) slice over its spatial positions."""
    _require_4d(input, "instance_norm input")
    x = input.data
    m = x.shape[2] * x.shape[3]
    mu = x.mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(x.var(axis=(2, 3), keepdims=True) + eps)
    xhat = (x - mu) * inv

    def backward(g: np.ndarray):
        g_sum = g.sum(axis=(2, 3), keepdims=True)
        gx_sum = (g * xhat).sum(axis=(2, 3), keepdims=True)
        return ((inv / m) * (m * g - g_sum - xhat * gx_sum),)

    return _node(xhat, (input,), backward)


def prelu(input: Tensor, slope: Tensor) -> Tensor:
    """x for x >= 0, slope * x otherwise; slope is per-channel or a single scalar."""
    _require_4d(input, "prelu input")
    c = input.shape[1]
    if slope.data.size not in (1, c):
        raise ConfigurationError(
            f"prelu slope must have 1 or {c} entries, got {slope.data.size}"
        )
    x = input.data
    a = slope.data.reshape(1, -1, 1, 1)
    neg = x < 0
    deriv = np.where(neg, a, np.asarray(1.0, dtype=x.dtype))
    out = deriv * x

    def backward(g: np.ndarray):
        neg_x = np.where(neg, x, np.asarray(0.0, dtype=x.dtype))
        ga = (g * neg_x).sum(axis=(0, 2, 3)) if slope.data.size == c else (g * neg_x).sum()
        return deriv * g, np.asarray(ga, dtype=slope.data.dtype).reshape(slope.shape)

    return _node(out, (input, slope), backward)


def sigmoid(input: Tensor) -> Tensor:
    x = input.data
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)

    def backward(g: np.ndarray):
        return (g * s * (1.0 - s),)

    return _node(s, (input,), backward)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------


def interleave_concat(x: Tensor, y: Tensor) -> Tensor:
    """Alternate the channels of two same-shape tensors: even from x, odd from y."""
    _require_4d(x, "interleave_concat x")
    if x.shape != y.shape:
        raise ShapeError(f"interleave_concat requires equal shapes, got {x.shape} vs {y.shape}")
    n, c, h, w = x.shape
    out = np.empty((n, 2 * c, h, w), dtype=np.result_type(x.data, y.data))
    out[:, 0::2] = x.data
    out[:, 1::2] = y.data

    def backward(g: np.ndarray):
        return np.ascontiguousarray(g[:, 0::2]), np.ascontiguousarray(g[:, 1::2])

    return _node(out, (x, y), backward)


def deinterleave(z: Tensor) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of interleave_concat on raw values (non-differentiable helper)."""
    if z.data.shape[1] % 2:
        raise ShapeError(f"deinterleave needs an even channel count, got {z.shape[1]}")
    return z.data[:, 0::2].copy(), z.data[:, 1::2].copy()


def channel_concat(x: Tensor, y: Tensor) -> Tensor:
    """Stack y's channels after x's (plain concatenation along axis 1)."""
    _require_4d(x, "channel_concat x")
    if x.shape != y.shape:
        raise ShapeError(f"channel_concat requires equal shapes, got {x.shape} vs {y.shape}")
    c = x.shape[1]
    out = np.concatenate([x.data, y.data], axis=1)

    def backward(g: np.ndarray):
        return np.ascontiguousarray(g[:, :c]), np.ascontiguousarray(g[:, c:])

    return _node(out, (x, y), backward)


def hadamard_mask(u: Tensor, m: Tensor) -> Tensor:
    """Gate every channel of u by a single-channel spatial mask."""
    _require_4d(u, "hadamard_mask features")
    _require_4d(m, "hadamard_mask mask")
    if m.shape[1] != 1:
        raise ShapeError(f"mask must have exactly 1 channel, got {m.shape[1]}")
    if m.shape[0] != u.shape[0] or m.shape[2:] != u.shape[2:]:
        raise ShapeError(f"mask shape {m.shape} does not match features {u.shape} on batch/spatial axes")
    out = u.data * m.data

    def backward(g: np.ndarray):
        return g * m.data, (g * u.data).sum(axis=1, keepdims=True)

    return _node(out, (u, m), backward)


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Row-stochastic matrix mapping n_in samples to n_out by half-pixel bilinear interpolation."""
    a = np.zeros((n_out, n_in), dtype=dtype)
    src = np.clip((np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    a[rows, lo] += (1.0 - frac).astype(dtype)
    a[rows, hi] += frac.astype(dtype)
    return a


def bilinear_upsample(input: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize (no corner alignment) to a spatial size at least as large."""
    _require_4d(input, "bilinear_upsample input")
    n, c, h, w = input.shape
    if out_h < h or out_w < w:
        raise ConfigurationError(
            f"upsample target {out_h}x{out_w} is smaller than input {h}x{w}"
        )
    ah = _interp_matrix(h, out_h, input.data.dtype)
    aw = _interp_matrix(w, out_w, input.data.dtype)
    out = np.einsum("nchw,oh,pw->ncop", input.data, ah, aw, optimize=True)

    def backward(g: np.ndarray):
        return (np.einsum("ncop,oh,pw->nchw", g, ah, aw, optimize=True),)

    return _node(out, (input,), backward)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

BCE_CLAMP = 1e-7


def _check_loss_pair(pred: Tensor, target: Tensor) -> None:
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    t = target.data
    if not np.all((t == 0) | (t == 1)):
        raise ValidationError("target mask must contain only 0 and 1")


def bce_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean binary cross entropy over all pixels; predictions are clamped before the logs."""
    _check_loss_pair(pred, target)
    p = pred.data
    t = target.data
    pc = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    loss = -(t * np.log(pc) + (1.0 - t) * np.log1p(-pc)).mean(dtype=p.dtype)
    inside = (p > BCE_CLAMP) & (p < 1.0 - BCE_CLAMP)

    def backward(g: np.ndarray):
        dp = -(t / pc - (1.0 - t) / (1.0 - pc)) / p.size
        return (g * np.where(inside, dp, 0.0).astype(p.dtype), None)

    return _node(np.asarray(loss, dtype=p.dtype), (pred, target), backward)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    _check_loss_pair(pred, target)
    diff = pred.data - target.data
    loss = np.asarray((diff * diff).mean(dtype=pred.data.dtype), dtype=pred.data.dtype)

    def backward(g: np.ndarray):
        return (g * (2.0 / diff.size) * diff, None)

    return _node(loss, (pred, target), backward)


def soft_iou_loss(pred: Tensor, target: Tensor) -> Tensor:
    """1 - soft intersection over union; 0 by convention when both masks are empty."""
    _check_loss_pair(pred, target)
    p = pred.data
    t = target.data
    inter = float((p * t).sum())
    union = float((p + t - p * t).sum())
    value = 1.0 - inter / union if union > 0.0 else 0.0

    def backward(g: np.ndarray):
        if union <= 0.0:
            return (np.zeros_like(p), None)
        dp = -(t * union - inter * (1.0 - t)) / (union * union)
        return (g * dp.astype(p.dtype), None)

    return _node(np.asarray(value, dtype=p.dtype), (pred, target), backward)


def bce_plus_iou_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Equal-weight sum of bce_loss and soft_iou_loss."""
    return bce_loss(pred, target) + soft_iou_loss(pred, target)


LOSSES = {
    "bce": bce_loss,
    "mse": mse_loss,
    "iou": soft_iou_loss,
    "bce_iou": bce_plus_iou_loss,
}
