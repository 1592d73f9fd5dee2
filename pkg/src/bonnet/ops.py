"""Operator kernels: forward rules, analytic gradients, and the dispatch tables.

All kernels take canonical NCHW arrays. Each differentiable kind has a
``FORWARD[kind](attrs, *inputs)`` rule and a ``BACKWARD[kind](attrs, inputs,
output, grad)`` rule returning one gradient per input (``None`` where an input
takes no gradient). Kernels are pure functions of their arguments, which is
what makes checkpointed recomputation bit-exact.

``conv2d`` ships two paths: the im2col/matmul path used everywhere, and a
plain-loop reference (:func:`conv2d_direct`) that defines correctness.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, UnsupportedOpError

# Serializable op kinds, in container-enum order.
KINDS = (
    "conv2d",
    "transposed_conv2d",
    "batch_norm",
    "relu",
    "dropout",
    "max_pool2d",
    "concat",
    "add",
    "softmax",
    "argmax",
    "resize_bilinear",
)

# Training-tape-only kinds; never serialized into a frozen container.
EXTRA_KINDS = ("focal_loss", "reduce_sum", "mul")


@dataclass(frozen=True)
class OpSpec:
    kind: str
    attrs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS and self.kind not in EXTRA_KINDS:
            raise UnsupportedOpError(f"unknown op kind {self.kind!r}")
        a = self.attrs
        if a.get("dilation", 1) < 1:
            raise ShapeError(f"dilation must be >= 1, got {a['dilation']}")
        if a.get("stride", 1) < 1:
            raise ShapeError(f"stride must be >= 1, got {a['stride']}")
        if "keep_prob" in a and not 0.0 < a["keep_prob"] <= 1.0:
            raise ShapeError(f"keep_prob must lie in (0, 1], got {a['keep_prob']}")
        if "eps" in a and a["eps"] <= 0:
            raise ShapeError(f"eps must be positive, got {a['eps']}")


# ---------------------------------------------------------------------------
# padding / geometry helpers


def _pad_amounts(size: int, k: int, stride: int, dilation: int, padding: str) -> tuple[int, int]:
    """Low/high pad for one spatial axis. 'same' puts the extra pad high."""
    span = dilation * (k - 1) + 1
    if padding == "valid":
        return 0, 0
    if padding != "same":
        raise ShapeError(f"padding mode must be 'same' or 'valid', got {padding!r}")
    out = -(-size // stride)  # ceil
    total = max((out - 1) * stride + span - size, 0)
    lo = total // 2
    return lo, total - lo


def conv_out_size(size: int, k: int, stride: int, dilation: int, padding: str) -> int:
    lo, hi = _pad_amounts(size, k, stride, dilation, padding)
    span = dilation * (k - 1) + 1
    out = (size + lo + hi - span) // stride + 1
    if out <= 0:
        raise ShapeError(
            f"zero-extent output: size {size}, kernel {k}, stride {stride}, "
            f"dilation {dilation}, padding {padding}")
    return out


def _im2col_indices(kh, kw, out_h, out_w, stride, dilation):
    i0 = dilation * np.repeat(np.arange(kh), kw)
    j0 = dilation * np.tile(np.arange(kw), kh)
    i1 = stride * np.repeat(np.arange(out_h), out_w)
    j1 = stride * np.tile(np.arange(out_w), out_h)
    ii = i0[:, None] + i1[None, :]  # (kh*kw, out_h*out_w)
    jj = j0[:, None] + j1[None, :]
    return ii, jj


def _im2col(x, kh, kw, stride, dilation, padding):
    n, c, h, w = x.shape
    plo_h, phi_h = _pad_amounts(h, kh, stride, dilation, padding)
    plo_w, phi_w = _pad_amounts(w, kw, stride, dilation, padding)
    out_h = conv_out_size(h, kh, stride, dilation, padding)
    out_w = conv_out_size(w, kw, stride, dilation, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (plo_h, phi_h), (plo_w, phi_w)))
    ii, jj = _im2col_indices(kh, kw, out_h, out_w, stride, dilation)
    cols = xp[:, :, ii, jj]  # (n, c, kh*kw, out_h*out_w)
    return cols.reshape(n, c * kh * kw, out_h * out_w), (out_h, out_w), (plo_h, plo_w, xp.shape)


def _col2im(gcols, x_shape, kh, kw, stride, dilation, padding):
    n, c, h, w = x_shape
    plo_h, phi_h = _pad_amounts(h, kh, stride, dilation, padding)
    plo_w, phi_w = _pad_amounts(w, kw, stride, dilation, padding)
    out_h = conv_out_size(h, kh, stride, dilation, padding)
    out_w = conv_out_size(w, kw, stride, dilation, padding)
    ii, jj = _im2col_indices(kh, kw, out_h, out_w, stride, dilation)
    gxp = np.zeros((n, c, h + plo_h + phi_h, w + plo_w + phi_w), dtype=gcols.dtype)
    np.add.at(gxp, (slice(None), slice(None), ii, jj),
              gcols.reshape(n, c, kh * kw, out_h * out_w))
    return gxp[:, :, plo_h:plo_h + h, plo_w:plo_w + w]


# ---------------------------------------------------------------------------
# conv2d


def _check_conv_shapes(x, w):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d needs 4-D input and weights, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"channel mismatch: input has {x.shape[1]} channels, weights expect {w.shape[1]}")
    if x.shape[2] == 0 or x.shape[3] == 0:
        raise ShapeError(f"zero-extent spatial dims in input {x.shape}")


def conv2d_forward(x, w, b, stride=1, padding="same", dilation=1):
    """im2col + matmul convolution; bias per output channel."""
    _check_conv_shapes(x, w)
    co, ci, kh, kw = w.shape
    n = x.shape[0]
    cols, (out_h, out_w), _ = _im2col(x, kh, kw, stride, dilation, padding)
    out = w.reshape(co, -1) @ cols  # (n, co, out_h*out_w) via broadcast
    out = out.reshape(n, co, out_h, out_w)
    if b is not None:
        out = out + b.reshape(1, co, 1, 1)
    return out


def conv2d_direct(x, w, b, stride=1, padding="same", dilation=1):
    """Plain-loop reference convolution. Correctness is defined by this path."""
    _check_conv_shapes(x, w)
    co, ci, kh, kw = w.shape
    n, _, h, wd = x.shape
    plo_h, phi_h = _pad_amounts(h, kh, stride, dilation, padding)
    plo_w, phi_w = _pad_amounts(wd, kw, stride, dilation, padding)
    out_h = conv_out_size(h, kh, stride, dilation, padding)
    out_w = conv_out_size(wd, kw, stride, dilation, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (plo_h, phi_h), (plo_w, phi_w)))
    out = np.zeros((n, co, out_h, out_w), dtype=x.dtype)
    for ni in range(n):
        for oc in range(co):
            for oy in range(out_h):
                for ox in range(out_w):
                    acc = 0.0
                    for ic in range(ci):
                        for ky in range(kh):
                            for kx in range(kw):
                                iy = oy * stride + ky * dilation
                                ix = ox * stride + kx * dilation
                                acc += xp[ni, ic, iy, ix] * w[oc, ic, ky, kx]
                    out[ni, oc, oy, ox] = acc + (b[oc] if b is not None else 0.0)
    return out


def conv2d_grad_input(g, w, x_shape, stride=1, padding="same", dilation=1):
    co, ci, kh, kw = w.shape
    n = g.shape[0]
    g2 = g.reshape(n, co, -1)
    gcols = w.reshape(co, -1).T @ g2  # (n, ci*kh*kw, L)
    return _col2im(gcols, (n, ci) + tuple(x_shape[2:]), kh, kw, stride, dilation, padding)


def conv2d_grad_weights(x, g, w_shape, stride=1, padding="same", dilation=1):
    co, ci, kh, kw = w_shape
    cols, _, _ = _im2col(x, kh, kw, stride, dilation, padding)
    n = x.shape[0]
    g2 = g.reshape(n, co, -1)
    gw = np.einsum("nol,nkl->ok", g2, cols)
    return gw.reshape(w_shape)


def _conv2d_fwd(attrs, x, w, b):
    out = conv2d_forward(x, w, b, attrs.get("stride", 1), attrs.get("padding", "same"),
                         attrs.get("dilation", 1))
    if attrs.get("fused_relu"):
        out = np.maximum(out, 0)
    return out


def _conv2d_bwd(attrs, inputs, output, grad):
    x, w, b = inputs
    if attrs.get("fused_relu"):
        grad = grad * (output > 0)
    s, p, d = attrs.get("stride", 1), attrs.get("padding", "same"), attrs.get("dilation", 1)
    gx = conv2d_grad_input(grad, w, x.shape, s, p, d)
    gw = conv2d_grad_weights(x, grad, w.shape, s, p, d)
    gb = grad.sum(axis=(0, 2, 3)) if b is not None else None
    return gx, gw, gb


# ---------------------------------------------------------------------------
# transposed conv2d
#
# Weights are (c_in, c_out, kh, kw). The op is the exact adjoint of a
# same-padding stride-s convolution, so spatial extents scale by the stride:
# (h, w) -> (h*s, w*s).


def transposed_conv2d_forward(x, w, b, stride=2):
    ci, co, kh, kw = w.shape
    if x.shape[1] != ci:
        raise ShapeError(
            f"channel mismatch: input has {x.shape[1]} channels, weights expect {ci}")
    n, _, h, wd = x.shape
    out = conv2d_grad_input(x, w, (n, co, h * stride, wd * stride), stride, "same", 1)
    if b is not None:
        out = out + b.reshape(1, co, 1, 1)
    return out


def _transposed_conv2d_fwd(attrs, x, w, b):
    out = transposed_conv2d_forward(x, w, b, attrs.get("stride", 2))
    if attrs.get("fused_relu"):
        out = np.maximum(out, 0)
    return out


def _transposed_conv2d_bwd(attrs, inputs, output, grad):
    x, w, b = inputs
    if attrs.get("fused_relu"):
        grad = grad * (output > 0)
    s = attrs.get("stride", 2)
    gx = conv2d_forward(grad, w, None, s, "same", 1)
    gw = conv2d_grad_weights(grad, x, w.shape, s, "same", 1)
    gb = grad.sum(axis=(0, 2, 3)) if b is not None else None
    return gx, gw, gb


# ---------------------------------------------------------------------------
# batch norm


def batch_stats(x):
    """Biased per-channel mean/variance over (n, h, w)."""
    mu = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    return mu, var


def _batch_norm_fwd(attrs, x, gamma, beta, running_mean, running_var):
    eps = attrs["eps"]
    if attrs.get("mode", "train") == "train":
        mu, var = batch_stats(x)
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    return gamma.reshape(1, -1, 1, 1) * (x - mu.reshape(1, -1, 1, 1)) \
        * inv.reshape(1, -1, 1, 1) + beta.reshape(1, -1, 1, 1)


def _batch_norm_bwd(attrs, inputs, output, grad):
    x, gamma, beta, running_mean, running_var = inputs
    eps = attrs["eps"]
    if attrs.get("mode", "train") == "train":
        mu, var = batch_stats(x)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x - mu.reshape(1, -1, 1, 1)) * inv.reshape(1, -1, 1, 1)
        m = x.shape[0] * x.shape[2] * x.shape[3]
        gsum = grad.sum(axis=(0, 2, 3))
        gxhat_sum = (grad * xhat).sum(axis=(0, 2, 3))
        gx = (gamma * inv).reshape(1, -1, 1, 1) / m * (
            m * grad
            - gsum.reshape(1, -1, 1, 1)
            - xhat * gxhat_sum.reshape(1, -1, 1, 1))
        return gx, gxhat_sum, gsum, None, None
    inv = 1.0 / np.sqrt(running_var + eps)
    xhat = (x - running_mean.reshape(1, -1, 1, 1)) * inv.reshape(1, -1, 1, 1)
    gx = grad * (gamma * inv).reshape(1, -1, 1, 1)
    ggamma = (grad * xhat).sum(axis=(0, 2, 3))
    gbeta = grad.sum(axis=(0, 2, 3))
    return gx, ggamma, gbeta, None, None


# ---------------------------------------------------------------------------
# elementwise / structural ops


def _relu_fwd(attrs, x):
    return np.maximum(x, 0)


def _relu_bwd(attrs, inputs, output, grad):
    return (grad * (inputs[0] > 0),)


def dropout_mask(shape, keep_prob, seed, dtype):
    rng = np.random.Generator(np.random.PCG64(seed))
    return (rng.random(shape) < keep_prob).astype(dtype) / dtype(keep_prob)


def _dropout_fwd(attrs, x):
    keep = attrs["keep_prob"]
    if attrs.get("mode", "train") == "infer" or keep >= 1.0:
        return x.copy()
    return x * dropout_mask(x.shape, keep, attrs["seed"], x.dtype.type)


def _dropout_bwd(attrs, inputs, output, grad):
    keep = attrs["keep_prob"]
    if attrs.get("mode", "train") == "infer" or keep >= 1.0:
        return (grad,)
    return (grad * dropout_mask(inputs[0].shape, keep, attrs["seed"], grad.dtype.type),)


def _pool_geometry(x, window, stride, padding):
    wh, ww = (window, window) if isinstance(window, int) else window
    n, c, h, w = x.shape
    plo_h, phi_h = _pad_amounts(h, wh, stride, 1, padding)
    plo_w, phi_w = _pad_amounts(w, ww, stride, 1, padding)
    if wh > h + plo_h + phi_h or ww > w + plo_w + phi_w:
        raise ShapeError(f"pool window ({wh}, {ww}) larger than padded input {x.shape}")
    return wh, ww, plo_h, phi_h, plo_w, phi_w


def _max_pool_fwd(attrs, x):
    window, stride = attrs["window"], attrs["stride"]
    padding = attrs.get("padding", "valid")
    wh, ww, plo_h, phi_h, plo_w, phi_w = _pool_geometry(x, window, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (plo_h, phi_h), (plo_w, phi_w)),
                constant_values=-np.inf)
    wins = np.lib.stride_tricks.sliding_window_view(xp, (wh, ww), axis=(2, 3))
    wins = wins[:, :, ::stride, ::stride]
    return wins.max(axis=(-2, -1))


def _max_pool_bwd(attrs, inputs, output, grad):
    x = inputs[0]
    window, stride = attrs["window"], attrs["stride"]
    padding = attrs.get("padding", "valid")
    wh, ww, plo_h, phi_h, plo_w, phi_w = _pool_geometry(x, window, stride, padding)
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (plo_h, phi_h), (plo_w, phi_w)),
                constant_values=-np.inf)
    wins = np.lib.stride_tricks.sliding_window_view(xp, (wh, ww), axis=(2, 3))
    wins = wins[:, :, ::stride, ::stride]
    oh, ow = wins.shape[2], wins.shape[3]
    # first-index tie-break in row-major window order
    flat_idx = wins.reshape(n, c, oh, ow, -1).argmax(axis=-1)
    ky, kx = flat_idx // ww, flat_idx % ww
    ni, ci_, oy, ox = np.indices((n, c, oh, ow))
    hpos = oy * stride + ky
    wpos = ox * stride + kx
    gxp = np.zeros(xp.shape, dtype=grad.dtype)
    np.add.at(gxp, (ni, ci_, hpos, wpos), grad)
    return (gxp[:, :, plo_h:plo_h + h, plo_w:plo_w + w],)


def _concat_fwd(attrs, *xs):
    return np.concatenate(xs, axis=1)


def _concat_bwd(attrs, inputs, output, grad):
    sizes = [x.shape[1] for x in inputs]
    splits = np.cumsum(sizes)[:-1]
    return tuple(np.split(grad, splits, axis=1))


def _add_fwd(attrs, x, y):
    if x.shape != y.shape:
        raise ShapeError(f"add requires equal shapes, got {x.shape} and {y.shape}")
    return x + y


def _add_bwd(attrs, inputs, output, grad):
    return grad, grad


def softmax_channel(z):
    """Stable softmax over the channel axis."""
    if z.shape[1] == 0:
        raise ShapeError("softmax requires at least one channel")
    zs = z - z.max(axis=1, keepdims=True)
    e = np.exp(zs)
    return e / e.sum(axis=1, keepdims=True)


def _softmax_fwd(attrs, x):
    return softmax_channel(x)


def _softmax_bwd(attrs, inputs, output, grad):
    p = output
    dot = (grad * p).sum(axis=1, keepdims=True)
    return (p * (grad - dot),)


def _argmax_fwd(attrs, x):
    if x.shape[1] == 0:
        raise ShapeError("argmax requires at least one channel")
    return x.argmax(axis=1).astype(np.int32)


def _resize_weights(size, out_size):
    """Half-pixel-center bilinear sampling positions along one axis."""
    scale = size / out_size
    src = (np.arange(out_size) + 0.5) * scale - 0.5
    src = np.clip(src, 0, size - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, size - 1)
    t = src - lo
    return lo, hi, t


def resize_bilinear(x, out_h, out_w):
    n, c, h, w = x.shape
    y0, y1, ty = _resize_weights(h, out_h)
    x0, x1, tx = _resize_weights(w, out_w)
    ty = ty.reshape(1, 1, -1, 1)
    tx = tx.reshape(1, 1, 1, -1)
    top = x[:, :, y0][:, :, :, x0] * (1 - tx) + x[:, :, y0][:, :, :, x1] * tx
    bot = x[:, :, y1][:, :, :, x0] * (1 - tx) + x[:, :, y1][:, :, :, x1] * tx
    return top * (1 - ty) + bot * ty


def _resize_bilinear_fwd(attrs, x):
    return resize_bilinear(x, attrs["out_h"], attrs["out_w"])


def _resize_bilinear_bwd(attrs, inputs, output, grad):
    x = inputs[0]
    n, c, h, w = x.shape
    out_h, out_w = attrs["out_h"], attrs["out_w"]
    y0, y1, ty = _resize_weights(h, out_h)
    x0, x1, tx = _resize_weights(w, out_w)
    gx = np.zeros_like(x)
    wy = ty.reshape(-1, 1)
    wx = tx.reshape(1, -1)
    for ys, wys in ((y0, 1 - wy), (y1, wy)):
        for xs, wxs in ((x0, 1 - wx), (x1, wx)):
            contrib = grad * (wys * wxs)
            np.add.at(gx, (slice(None), slice(None), ys[:, None], xs[None, :]), contrib)
    return (gx,)


# ---------------------------------------------------------------------------
# focal loss (training-only node; gamma=0 recovers weighted cross-entropy)


def _focal_loss_fwd(attrs, logits, labels):
    gamma = attrs["gamma"]
    weights = np.asarray(attrs["class_weights"], dtype=logits.dtype)
    c = logits.shape[1]
    if labels.min() < 0 or labels.max() >= c:
        raise ShapeError(f"label out of range [0, {c}) in loss")
    p = softmax_channel(logits)
    py = np.take_along_axis(p, labels[:, None].astype(np.int64), axis=1)[:, 0]
    py = np.maximum(py, 1e-12)
    w = weights[labels]
    return np.asarray((w * (1.0 - py) ** gamma * (-np.log(py))).mean(), dtype=logits.dtype)


def _focal_loss_bwd(attrs, inputs, output, grad):
    logits, labels = inputs
    gamma = attrs["gamma"]
    weights = np.asarray(attrs["class_weights"], dtype=logits.dtype)
    p = softmax_channel(logits)
    lab = labels[:, None].astype(np.int64)
    py = np.take_along_axis(p, lab, axis=1)[:, 0]
    py = np.maximum(py, 1e-12)
    u = 1.0 - py
    if gamma == 0:
        fprime = -1.0 / py
    else:
        safe_u = np.maximum(u, 1e-12)
        fprime = np.where(
            u > 1e-12,
            gamma * safe_u ** (gamma - 1.0) * np.log(py) - safe_u ** gamma / py,
            0.0)
    w = weights[labels]
    m = py.size
    coef = (w * fprime * py / m)[:, None]
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, lab, 1.0, axis=1)
    gz = coef * (onehot - p) * grad
    return gz.astype(logits.dtype), None


def _reduce_sum_fwd(attrs, x):
    return np.asarray(x.sum(), dtype=x.dtype)


def _reduce_sum_bwd(attrs, inputs, output, grad):
    return (np.full_like(inputs[0], grad),)


def _mul_fwd(attrs, x, y):
    return x * y


def _mul_bwd(attrs, inputs, output, grad):
    x, y = inputs
    return grad * y, grad * x


FORWARD = {
    "conv2d": _conv2d_fwd,
    "transposed_conv2d": _transposed_conv2d_fwd,
    "batch_norm": _batch_norm_fwd,
    "relu": _relu_fwd,
    "dropout": _dropout_fwd,
    "max_pool2d": _max_pool_fwd,
    "concat": _concat_fwd,
    "add": _add_fwd,
    "softmax": _softmax_fwd,
    "argmax": _argmax_fwd,
    "resize_bilinear": _resize_bilinear_fwd,
    "focal_loss": _focal_loss_fwd,
    "reduce_sum": _reduce_sum_fwd,
    "mul": _mul_fwd,
}

BACKWARD = {
    "conv2d": _conv2d_bwd,
    "transposed_conv2d": _transposed_conv2d_bwd,
    "batch_norm": _batch_norm_bwd,
    "relu": _relu_bwd,
    "dropout": _dropout_bwd,
    "max_pool2d": _max_pool_bwd,
    "concat": _concat_bwd,
    "add": _add_bwd,
    "softmax": _softmax_bwd,
    "resize_bilinear": _resize_bilinear_bwd,
    "focal_loss": _focal_loss_bwd,
    "reduce_sum": _reduce_sum_bwd,
    "mul": _mul_bwd,
}


def forward(kind, attrs, *inputs):
    try:
        fn = FORWARD[kind]
    except KeyError:
        raise UnsupportedOpError(f"no forward rule for op kind {kind!r}") from None
    return fn(attrs, *inputs)


def backward(kind, attrs, inputs, output, grad):
    try:
        fn = BACKWARD[kind]
    except KeyError:
        raise UnsupportedOpError(f"op kind {kind!r} has no registered derivative") from None
    return fn(attrs, inputs, output, grad)
