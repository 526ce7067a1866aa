"""Differentiable ops: convolution, batch norm, resampling and loss primitives.

Every op builds a DenseTensor whose backward closure returns analytic grads
for each parent. Shapes are validated eagerly; mismatches raise
ConfigurationError rather than broadcasting.
"""

import logging

import numpy as np

from .tensor import (
    ConfigurationError,
    DenseTensor,
    Parameter,
    as_tensor,
    check_finite,
)

log = logging.getLogger(__name__)


def _t(x):
    return x.tensor if isinstance(x, Parameter) else x


def _same_dtype(*tensors):
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ConfigurationError(f"mixed dtypes in op: {dt} vs {t.dtype}")
    return dt


# ---------------------------------------------------------------------------
# convolution


def _corr2d(x, w, stride, pad_h, pad_w):
    """Raw 2-D cross-correlation (NCHW x OIHW) via im2col + GEMM."""
    B, C, H, W = x.shape
    OC, IC, kh, kw = w.shape
    if IC != C:
        raise ConfigurationError(f"conv weight expects {IC} input channels, got {C}")
    if pad_h or pad_w:
        x = np.pad(x, ((0, 0), (0, 0), (pad_h, pad_h), (pad_w, pad_w)))
    Hp, Wp = x.shape[2:]
    if Hp < kh or Wp < kw:
        raise ConfigurationError("conv input smaller than kernel after padding")
    OH = (Hp - kh) // stride + 1
    OW = (Wp - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    view = np.lib.stride_tricks.as_strided(
        x,
        shape=(B, C, kh, kw, OH, OW),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
    )
    cols = view.transpose(0, 4, 5, 1, 2, 3).reshape(B * OH * OW, C * kh * kw)
    out = cols @ w.reshape(OC, -1).T
    return out.reshape(B, OH, OW, OC).transpose(0, 3, 1, 2), cols


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation with zero padding; grads for input, weight and bias."""
    x, wt = _t(x), _t(weight)
    bt = _t(bias) if bias is not None else None
    if x.data.ndim != 4:
        raise ConfigurationError(f"conv2d expects 4-D input, got {x.data.ndim}-D")
    if wt.data.ndim != 4:
        raise ConfigurationError("conv2d weight must be (outC, inC, kH, kW)")
    if stride < 1 or padding < 0:
        raise ConfigurationError("conv2d needs stride >= 1 and padding >= 0")
    _same_dtype(x, wt)

    out_data, _ = _corr2d(x.data, wt.data, stride, padding, padding)
    if bt is not None:
        if bt.data.shape != (wt.data.shape[0],):
            raise ConfigurationError("conv2d bias must be 1-D of length outC")
        out_data = out_data + bt.data[None, :, None, None]
    check_finite(out_data, "conv2d")

    B, OC, OH, OW = out_data.shape
    kh, kw = wt.data.shape[2:]

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(B * OH * OW, OC)
        # recompute cols rather than keeping them alive through the graph
        _, cols = _corr2d(x.data, wt.data, stride, padding, padding)
        dw = (gmat.T @ cols).reshape(wt.data.shape)
        dx = _conv2d_input_grad(g, wt.data, x.data.shape, stride, padding)
        db = g.sum(axis=(0, 2, 3)) if bt is not None else None
        return (dx, dw, db) if bt is not None else (dx, dw)

    parents = (x, wt, bt) if bt is not None else (x, wt)
    req = any(p.requires_grad or p._parents for p in parents)
    return DenseTensor(out_data, requires_grad=req, parents=parents, backward_fn=backward)


def _conv2d_input_grad(g, w, x_shape, stride, padding):
    """Gradient w.r.t. conv input: dilate the output grad, correlate with the
    channel-swapped, spatially flipped kernel."""
    B, OC, OH, OW = g.shape
    _, C, kh, kw = w.shape
    H, W = x_shape[2], x_shape[3]
    Hp, Wp = H + 2 * padding, W + 2 * padding
    canvas = np.zeros((B, OC, Hp - kh + 1, Wp - kw + 1), dtype=g.dtype)
    canvas[:, :, :: stride, :: stride][:, :, :OH, :OW] = g
    wflip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    dxp, _ = _corr2d(canvas, wflip, 1, kh - 1, kw - 1)
    if padding:
        dxp = dxp[:, :, padding : padding + H, padding : padding + W]
    return np.ascontiguousarray(dxp)


# ---------------------------------------------------------------------------
# batch norm


class RunningStats:
    """Per-channel running mean/variance for batchnorm2d."""

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def state(self):
        return {"mean": self.mean.copy(), "var": self.var.copy()}

    def load(self, state):
        self.mean = np.asarray(state["mean"], dtype=self.mean.dtype).copy()
        self.var = np.asarray(state["var"], dtype=self.var.dtype).copy()


def batchnorm2d(x, scale, shift, stats, mode):
    """Train mode normalizes by batch stats and updates running stats;
    eval mode normalizes by the running stats. Zero-variance channels are
    stabilized by eps, never divided to infinity."""
    x, sc, sh = _t(x), _t(scale), _t(shift)
    if x.data.ndim != 4:
        raise ConfigurationError("batchnorm2d expects 4-D input")
    C = x.data.shape[1]
    if sc.data.shape != (C,) or sh.data.shape != (C,):
        raise ConfigurationError(
            f"batchnorm2d parameters must have length {C}, got "
            f"{sc.data.shape} / {sh.data.shape}"
        )
    if mode not in ("train", "eval"):
        raise ConfigurationError(f"batchnorm2d mode must be train|eval, got {mode!r}")
    eps = x.data.dtype.type(stats.eps)

    if mode == "train":
        n = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        m = stats.momentum
        unbiased = var * (n / (n - 1)) if n > 1 else var
        stats.mean = ((1 - m) * stats.mean + m * mu).astype(stats.mean.dtype)
        stats.var = ((1 - m) * stats.var + m * unbiased).astype(stats.var.dtype)
    else:
        mu = stats.mean.astype(x.data.dtype)
        var = stats.var.astype(x.data.dtype)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out_data = xhat * sc.data[None, :, None, None] + sh.data[None, :, None, None]
    check_finite(out_data, "batchnorm2d")

    def backward(g):
        dscale = (g * xhat).sum(axis=(0, 2, 3))
        dshift = g.sum(axis=(0, 2, 3))
        gs = g * sc.data[None, :, None, None]
        if mode == "eval":
            dx = gs * inv_std[None, :, None, None]
        else:
            n = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
            sum_gs = gs.sum(axis=(0, 2, 3), keepdims=True)
            sum_gs_xhat = (gs * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dx = (
                inv_std[None, :, None, None]
                * (gs - sum_gs / n - xhat * sum_gs_xhat / n)
            )
        return dx, dscale, dshift

    parents = (x, sc, sh)
    req = any(p.requires_grad or p._parents for p in parents)
    return DenseTensor(out_data, requires_grad=req, parents=parents, backward_fn=backward)


# ---------------------------------------------------------------------------
# elementwise / structural


def relu(x):
    x = _t(x)
    out_data = np.maximum(x.data, 0)

    def backward(g):
        return (g * (x.data > 0),)

    return DenseTensor(out_data, requires_grad=x.requires_grad or bool(x._parents),
                       parents=(x,), backward_fn=backward)


def add(a, b):
    a, b = _t(a), _t(b)
    if a.data.shape != b.data.shape:
        raise ConfigurationError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    _same_dtype(a, b)
    out_data = a.data + b.data
    check_finite(out_data, "add")

    def backward(g):
        return g, g

    req = any(p.requires_grad or p._parents for p in (a, b))
    return DenseTensor(out_data, requires_grad=req, parents=(a, b), backward_fn=backward)


def scale(x, s):
    """Multiply by a python scalar (loss weighting and similar)."""
    x = _t(x)
    s = x.data.dtype.type(s)
    out_data = x.data * s

    def backward(g):
        return (g * s,)

    return DenseTensor(out_data, requires_grad=x.requires_grad or bool(x._parents),
                       parents=(x,), backward_fn=backward)


def concat_channels(tensors):
    tensors = [_t(t) for t in tensors]
    if not tensors:
        raise ConfigurationError("concat_channels needs at least one tensor")
    ref = tensors[0].data.shape
    for t in tensors[1:]:
        s = t.data.shape
        if len(s) != len(ref) or s[0] != ref[0] or s[2:] != ref[2:]:
            raise ConfigurationError(f"concat_channels spatial/batch mismatch: {ref} vs {s}")
    _same_dtype(*tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=1)
    sizes = [t.data.shape[1] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.ascontiguousarray(g[:, offsets[i] : offsets[i + 1]])
            for i in range(len(tensors))
        )

    req = any(t.requires_grad or t._parents for t in tensors)
    return DenseTensor(out_data, requires_grad=req, parents=tuple(tensors), backward_fn=backward)


def slice_channels(x, start, stop):
    x = _t(x)
    C = x.data.shape[1]
    if not (0 <= start < stop <= C):
        raise ConfigurationError(f"slice_channels [{start}:{stop}] out of range for C={C}")
    out_data = np.ascontiguousarray(x.data[:, start:stop])

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return DenseTensor(out_data, requires_grad=x.requires_grad or bool(x._parents),
                       parents=(x,), backward_fn=backward)


def reshape(x, shape):
    x = _t(x)
    out_data = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.data.shape),)

    return DenseTensor(out_data, requires_grad=x.requires_grad or bool(x._parents),
                       parents=(x,), backward_fn=backward)


def transpose(x, axes):
    x = _t(x)
    axes = tuple(axes)
    inv = tuple(int(np.argsort(axes)[i]) for i in range(len(axes)))
    out_data = np.ascontiguousarray(x.data.transpose(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return DenseTensor(out_data, requires_grad=x.requires_grad or bool(x._parents),
                       parents=(x,), backward_fn=backward)


def crop2d(x, top, left, height, width):
    """Spatial crop on a NCHW map; backward zero-embeds into the full extent."""
    x = _t(x)
    B, C, H, W = x.data.shape
    if top < 0 or left < 0 or top + height > H or left + width > W:
        raise ConfigurationError(
            f"crop window [{top}:{top+height}, {left}:{left+width}] outside {H}x{W}"
        )
    out_data = np.ascontiguousarray(x.data[:, :, top : top + height, left : left + width])

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, :, top : top + height, left : left + width] = g
        return (full,)

    return DenseTensor(out_data, requires_grad=x.requires_grad or bool(x._parents),
                       parents=(x,), backward_fn=backward)


# ---------------------------------------------------------------------------
# bilinear upsample (integer factor, half-pixel centers, clamped borders)

_TAP_CACHE = {}


def _axis_taps(n, factor):
    """Forward taps (idx0, idx1, w0, w1) and the padded adjoint tap table."""
    key = (n, factor)
    if key in _TAP_CACHE:
        return _TAP_CACHE[key]
    out = np.arange(n * factor, dtype=np.float64)
    src = (out + 0.5) / factor - 0.5
    i0 = np.floor(src).astype(np.int64)
    w1 = src - i0
    w0 = 1.0 - w1
    i1 = i0 + 1
    i0c = np.clip(i0, 0, n - 1)
    i1c = np.clip(i1, 0, n - 1)

    buckets = [[] for _ in range(n)]
    for o in range(n * factor):
        buckets[i0c[o]].append((o, w0[o]))
        buckets[i1c[o]].append((o, w1[o]))
    m = max(len(b) for b in buckets)
    adj_idx = np.zeros((n, m), dtype=np.int64)
    adj_w = np.zeros((n, m), dtype=np.float64)
    for i, b in enumerate(buckets):
        for k, (o, w) in enumerate(b):
            adj_idx[i, k] = o
            adj_w[i, k] = w
    taps = (i0c, i1c, w0, w1, adj_idx, adj_w)
    _TAP_CACHE[key] = taps
    return taps


def _upsample_axis(data, factor, axis):
    i0, i1, w0, w1, _, _ = _axis_taps(data.shape[axis], factor)
    w0 = w0.astype(data.dtype)
    w1 = w1.astype(data.dtype)
    shape = [1] * data.ndim
    shape[axis] = -1
    a = np.take(data, i0, axis=axis) * w0.reshape(shape)
    b = np.take(data, i1, axis=axis) * w1.reshape(shape)
    return a + b


def _upsample_axis_adjoint(g, n_in, factor, axis):
    _, _, _, _, adj_idx, adj_w = _axis_taps(n_in, factor)
    adj_w = adj_w.astype(g.dtype)
    out_shape = list(g.shape)
    out_shape[axis] = n_in
    out = np.zeros(out_shape, dtype=g.dtype)
    shape = [1] * g.ndim
    shape[axis] = -1
    for k in range(adj_idx.shape[1]):
        out += np.take(g, adj_idx[:, k], axis=axis) * adj_w[:, k].reshape(shape)
    return out


def bilinear_upsample(x, factor):
    """Scale both spatial extents of a NCHW map by an integer factor."""
    x = _t(x)
    if x.data.ndim != 4:
        raise ConfigurationError("bilinear_upsample expects 4-D input")
    if int(factor) != factor or factor < 1:
        raise ConfigurationError(f"upsample factor must be an integer >= 1, got {factor}")
    factor = int(factor)
    if factor == 1:
        out_data = x.data.copy()

        def backward_id(g):
            return (g,)

        return DenseTensor(out_data, requires_grad=x.requires_grad or bool(x._parents),
                           parents=(x,), backward_fn=backward_id)

    H, W = x.data.shape[2], x.data.shape[3]
    out_data = _upsample_axis(_upsample_axis(x.data, factor, 2), factor, 3)

    def backward(g):
        g = _upsample_axis_adjoint(g, W, factor, 3)
        g = _upsample_axis_adjoint(g, H, factor, 2)
        return (g,)

    return DenseTensor(out_data, requires_grad=x.requires_grad or bool(x._parents),
                       parents=(x,), backward_fn=backward)


# ---------------------------------------------------------------------------
# channel-to-height


def channel_to_height(x, z_bins, classes):
    """Reshape B x (Z*Cls) x H x W into B x Cls x Z x H x W. Pure data movement,
    exact bijection; channels are laid out z-major (c = z * classes + cls)."""
    x = _t(x)
    B, C, H, W = x.data.shape
    if z_bins * classes != C:
        raise ConfigurationError(
            f"channel_to_height: {C} channels != z_bins {z_bins} * classes {classes}"
        )
    out_data = np.ascontiguousarray(
        x.data.reshape(B, z_bins, classes, H, W).transpose(0, 2, 1, 3, 4)
    )

    def backward(g):
        return (np.ascontiguousarray(g.transpose(0, 2, 1, 3, 4)).reshape(B, C, H, W),)

    return DenseTensor(out_data, requires_grad=x.requires_grad or bool(x._parents),
                       parents=(x,), backward_fn=backward)


def height_to_channel(x):
    """Inverse of channel_to_height: B x Cls x Z x H x W -> B x (Z*Cls) x H x W."""
    x = _t(x)
    if x.data.ndim != 5:
        raise ConfigurationError("height_to_channel expects 5-D input")
    B, cls, z, H, W = x.data.shape
    out_data = np.ascontiguousarray(x.data.transpose(0, 2, 1, 3, 4)).reshape(B, z * cls, H, W)

    def backward(g):
        return (np.ascontiguousarray(
            g.reshape(B, z, cls, H, W).transpose(0, 2, 1, 3, 4)
        ),)

    return DenseTensor(out_data, requires_grad=x.requires_grad or bool(x._parents),
                       parents=(x,), backward_fn=backward)


# ---------------------------------------------------------------------------
# softmax cross entropy


def softmax_cross_entropy(logits, targets, ignore_id=None, weight=1.0):
    """Mean cross-entropy over non-ignored elements, scaled by `weight`.

    `logits` has the class axis at dim 1; `targets` holds integer class ids of
    the same shape with the class axis removed. Returns a scalar tensor.
    """
    logits = _t(logits)
    targets = np.asarray(targets)
    K = logits.data.shape[1]
    if K < 2:
        raise ConfigurationError("softmax_cross_entropy needs >= 2 classes")
    expect = logits.data.shape[:1] + logits.data.shape[2:]
    if targets.shape != expect:
        raise ConfigurationError(
            f"targets shape {targets.shape} != logits-minus-class {expect}"
        )
    if ignore_id is not None:
        valid = targets != ignore_id
    else:
        valid = np.ones_like(targets, dtype=bool)
    checked = targets[valid]
    if checked.size and (checked.min() < 0 or checked.max() >= K):
        raise ConfigurationError(f"target class ids outside [0, {K})")

    x = logits.data
    m = x.max(axis=1, keepdims=True)
    ex = np.exp(x - m)
    z = ex.sum(axis=1, keepdims=True)
    p = ex / z
    t_idx = np.expand_dims(np.where(valid, targets, 0), 1)
    logp_t = np.take_along_axis(x - m - np.log(z), t_idx, axis=1)[:, 0]
    count = int(valid.sum())
    dtype = x.dtype

    if count == 0:
        log.warning("softmax_cross_entropy: all elements ignored, returning zero loss")
        out_data = np.zeros((), dtype=dtype)

        def backward_zero(g):
            return (np.zeros_like(x),)

        return DenseTensor(out_data, requires_grad=logits.requires_grad or bool(logits._parents),
                           parents=(logits,), backward_fn=backward_zero)

    w = dtype.type(weight)
    loss = -(logp_t * valid).sum(dtype=np.float64) / count
    out_data = np.asarray(loss * float(w), dtype=dtype)
    check_finite(out_data, "softmax_cross_entropy")

    def backward(g):
        grad = p.copy()
        at_t = np.take_along_axis(grad, t_idx, axis=1) - 1.0
        np.put_along_axis(grad, t_idx, at_t, axis=1)
        grad *= np.expand_dims(valid, 1).astype(dtype)
        grad *= g * w / dtype.type(count)
        return (grad,)

    return DenseTensor(out_data, requires_grad=logits.requires_grad or bool(logits._parents),
                       parents=(logits,), backward_fn=backward)
