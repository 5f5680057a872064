"""Dense tensors with a reverse-mode gradient tape.

Every op that touches a tensor with ``requires_grad`` appends a node to the
module-level tape. ``backward`` walks the tape in strict reverse insertion
order (insertion order is already topological) and clears it afterwards.

Only the handful of ops the segmentation model, the losses and the
attention block need are provided. Arrays are float32 by default; inside
``float64_mode()`` new tensors are float64, which the gradient checks use.
"""
from contextlib import contextmanager
from functools import lru_cache
from math import prod

import numpy as np

from . import kernels
from .errors import ContractError, DimensionError, NumericDomainError

_default_dtype = np.float32
_grad_enabled = True


class Node:
    __slots__ = ("op", "inputs", "out", "backward")

    def __init__(self, op, inputs, out, backward):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward = backward


class Tape:
    """Ordered record of differentiable ops since the last ``backward``."""

    def __init__(self):
        self.nodes = []

    def record(self, node):
        self.nodes.append(node)

    def clear(self):
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)


TAPE = Tape()


def grad_enabled():
    return _grad_enabled


@contextmanager
def no_grad():
    """Run ops without recording them on the tape."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextmanager
def float64_mode():
    """Create new tensors as float64 (gradient-check mode)."""
    global _default_dtype
    prev, _default_dtype = _default_dtype, np.float64
    try:
        yield
    finally:
        _default_dtype = prev


def default_dtype():
    return _default_dtype


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=_default_dtype, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @classmethod
    def _wrap(cls, data):
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else mul_scalar(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return mul_scalar(self, 1.0 / other)

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = shape[0]
        return reshape(self, shape)


def _not_scalar(t):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op, *arrays):
    for a in arrays:
        if not np.isfinite(a).all():
            raise NumericDomainError(f"{op}: non-finite input values")


def _result(data, op, inputs, backward):
    out = Tensor._wrap(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        TAPE.record(Node(op, inputs, out, backward))
    return out


def backward(loss):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor."""
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        shape = getattr(loss, "shape", None)
        raise ContractError(f"backward needs a scalar loss, got shape {shape}")
    if not loss.requires_grad:
        TAPE.clear()
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(TAPE.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        node.out.grad = g
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    # whatever is left belongs to leaves (tensors no node produced)
    leaves = {}
    for node in TAPE.nodes:
        for t in node.inputs:
            if t.requires_grad and id(t) in grads:
                leaves[id(t)] = t
    for key, t in leaves.items():
        g = grads[key]
        t.grad = g if t.grad is None else t.grad + g
    TAPE.clear()


def stop_gradient(x):
    """Same values, detached from the tape."""
    return Tensor._wrap(x.data)


# ---------------------------------------------------------------- elementwise


def _same_shape(op, a, b):
    if a.shape != b.shape:
        axis = next((i for i, (p, q) in enumerate(zip(a.shape, b.shape)) if p != q), None)
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ", axis=axis)


def add(a, b):
    _same_shape("add", a, b)
    return _result(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a, b):
    _same_shape("sub", a, b)
    return _result(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a, b):
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def mul_scalar(x, c):
    c = x.data.dtype.type(c)
    return _result(x.data * c, "mul_scalar", (x,), lambda g: (g * c,))


def add_scalar(x, c):
    c = x.data.dtype.type(c)
    return _result(x.data + c, "add_scalar", (x,), lambda g: (g,))


def relu(x):
    _check_finite("relu", x.data)
    out = np.maximum(x.data, 0)
    return _result(out, "relu", (x,), lambda g: (g * (out > 0),))


def huber(delta, rho=1.0):
    """Elementwise Huber penalty: quadratic inside |d| <= rho, linear outside."""
    if rho <= 0:
        raise ValueError("rho must be positive")
    d = delta.data
    _check_finite("huber", d)
    r = d.dtype.type(rho)
    a = np.abs(d)
    out = np.where(a <= r, 0.5 * d * d, r * a - 0.5 * r * r).astype(d.dtype)
    return _result(out, "huber", (delta,), lambda g: (g * np.clip(d, -r, r),))


def dropout(x, p, rng):
    """Inverted dropout; the sampled mask is a constant for backward."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    keep = rng.random(x.shape, dtype=np.float32) >= np.float32(p)
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - p))
    return _result(x.data * mask, "dropout", (x,), lambda g: (g * mask,))


# ----------------------------------------------------------------- reductions


def _axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None):
    axes = _axes(axis, x.ndim)
    shape = x.shape
    keep = tuple(1 if i in axes else s for i, s in enumerate(shape))
    out = x.data.sum(axis=axes, dtype=x.dtype)
    return _result(np.asarray(out), "sum", (x,),
                   lambda g: (np.broadcast_to(g.reshape(keep), shape).copy(),))


def mean(x, axis=None):
    axes = _axes(axis, x.ndim)
    shape = x.shape
    count = prod(shape[i] for i in axes)
    keep = tuple(1 if i in axes else s for i, s in enumerate(shape))
    scale = x.dtype.type(1.0 / count)
    out = x.data.sum(axis=axes, dtype=x.dtype) * scale
    return _result(np.asarray(out, dtype=x.dtype), "mean", (x,),
                   lambda g: (np.broadcast_to(g.reshape(keep) * scale, shape).copy(),))


# -------------------------------------------------------------------- shaping


def reshape(x, shape):
    shape = tuple(shape)
    old = x.shape
    return _result(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(old),))


def flatten_spatial(x):
    """(N, C, H, W) -> (N, C, H*W)."""
    if x.ndim != 4:
        raise DimensionError(f"flatten_spatial expects NCHW, got {x.shape}", axis=None)
    n, c, h, w = x.shape
    return reshape(x, (n, c, h * w))


def transpose(x, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(x.data.transpose(axes)), "transpose", (x,),
                   lambda g: (np.ascontiguousarray(g.transpose(inv)),))


# ------------------------------------------------------------------ linear ops


def matmul(a, b):
    """Batched matrix product. ``b`` may be a 2-D weight shared over a's batch."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError("matmul needs operands with at least 2 dims")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(
            f"matmul: inner extents {ad.shape[-1]} and {bd.shape[-2]} differ", axis=ad.ndim - 1)
    if bd.ndim == 2:
        pass
    elif ad.shape[:-2] != bd.shape[:-2]:
        raise DimensionError(f"matmul: batch shapes {ad.shape[:-2]} and {bd.shape[:-2]} differ",
                             axis=0)
    _check_finite("matmul", ad, bd)

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return ga, gb

    return _result(np.matmul(ad, bd), "matmul", (a, b), back)


def conv2d(x, weight, bias=None, stride=1, padding=None):
    """Square-kernel cross-correlation on NCHW input.

    3x3 kernels use padding 1; 1x1 kernels (the decoder projections) use 0.
    """
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be NCHW, got {x.shape}", axis=None)
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3] or weight.shape[2] not in (1, 3):
        raise DimensionError(f"conv2d weight must be OutC x InC x k x k with k in (1, 3), "
                             f"got {weight.shape}", axis=2)
    n, c, h, w = x.shape
    out_c, in_c, k, _ = weight.shape
    if c != in_c:
        raise DimensionError(f"conv2d: input has {c} channels, weight expects {in_c}", axis=1)
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    pad = (k - 1) // 2 if padding is None else padding
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: input {h}x{w} too small", axis=2 if ho < 1 else 3)
    if bias is not None and bias.shape != (out_c,):
        raise DimensionError(f"conv2d bias must have shape ({out_c},), got {bias.shape}", axis=0)
    _check_finite("conv2d", x.data, weight.data)
    inputs = (x, weight) if bias is None else (x, weight, bias)
    if k > 1 and 4 * out_c <= in_c:
        return _conv2d_gather(x, weight, bias, stride, pad, ho, wo, inputs)

    cols = kernels.im2col(x.data, k, stride, pad)
    wmat = weight.data.reshape(out_c, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, out_c, ho, wo)

    def back(g):
        g2 = g.reshape(n, out_c, ho * wo)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.zeros_like(wmat)
            for i in range(n):
                gw += g2[i] @ cols[i].T
            gw = gw.reshape(weight.shape)
        if x.requires_grad:
            gx = kernels.col2im(np.matmul(wmat.T, g2), x.shape, k, stride, pad)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=(0, 2))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _result(out, "conv2d", inputs, back)


def _conv2d_gather(x, weight, bias, stride, pad, ho, wo, inputs):
    """Conv for few output channels: multiply first, then shift-add.

    Avoids the C*k*k x H*W column buffer; the per-tap products are only
    k*k*OutC x H*W.
    """
    n, c, h, w = x.shape
    out_c, _, k, _ = weight.shape
    # taps: (k*k*OutC, C), rows ordered (ki, kj, o)
    taps = np.ascontiguousarray(weight.data.transpose(2, 3, 0, 1).reshape(k * k * out_c, c))
    xs = x.data.reshape(n, c, h * w)
    prod_ = np.matmul(taps, xs).reshape(n, k, k, out_c, h, w)
    hp, wp = h + 2 * pad, w + 2 * pad
    padded = np.zeros((n, k, k, out_c, hp, wp), dtype=prod_.dtype)
    padded[..., pad:pad + h, pad:pad + w] = prod_
    out = np.zeros((n, out_c, ho, wo), dtype=prod_.dtype)
    ys = stride * (ho - 1) + 1
    xs_ = stride * (wo - 1) + 1
    for ki in range(k):
        for kj in range(k):
            out += padded[:, ki, kj, :, ki:ki + ys:stride, kj:kj + xs_:stride]
    if bias is not None:
        out += bias.data[:, None, None]

    def back(g):
        gx = gw = gb = None
        gpad = np.zeros((n, k, k, out_c, hp, wp), dtype=g.dtype)
        for ki in range(k):
            for kj in range(k):
                gpad[:, ki, kj, :, ki:ki + ys:stride, kj:kj + xs_:stride] = g
        gprod = gpad[..., pad:pad + h, pad:pad + w].reshape(n, k * k * out_c, h * w)
        if weight.requires_grad:
            gt = np.zeros_like(taps)
            for i in range(n):
                gt += gprod[i] @ xs[i].T
            gw = np.ascontiguousarray(gt.reshape(k, k, out_c, c).transpose(2, 3, 0, 1))
        if x.requires_grad:
            gx = np.matmul(taps.T, gprod).reshape(n, c, h, w)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _result(out, "conv2d", inputs, back)


# -------------------------------------------------------------- normalisation


def softmax(x, axis=1):
    d = x.data
    _check_finite("softmax", d)
    e = np.exp(d - d.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, "softmax", (x,), back)


def instance_norm(x, weight=None, bias=None, eps=1e-5):
    """Normalise each (sample, channel) plane over its last two axes.

    Optional per-channel affine ``weight``/``bias`` of shape (C,).
    """
    if x.ndim != 4:
        raise DimensionError(f"instance_norm expects a 4-D tensor, got {x.shape}")
    d = x.data
    _check_finite("instance_norm", d)
    c = x.shape[1]
    for p in (weight, bias):
        if p is not None and p.shape != (c,):
            raise DimensionError(f"instance_norm affine params need shape ({c},)", axis=1)
    m = x.shape[2] * x.shape[3]
    mu = d.mean(axis=(2, 3), keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + d.dtype.type(eps))
    xhat = (xc * inv).astype(d.dtype)
    out = xhat
    if weight is not None:
        out = out * weight.data[None, :, None, None]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    inputs = tuple(t for t in (x, weight, bias) if t is not None)

    def back(g):
        dxhat = g if weight is None else g * weight.data[None, :, None, None]
        s1 = dxhat.sum(axis=(2, 3), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(2, 3), keepdims=True)
        gx = (inv / m) * (m * dxhat - s1 - xhat * s2)
        grads = [gx.astype(d.dtype)]
        if weight is not None:
            grads.append((g * xhat).sum(axis=(0, 2, 3)))
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _result(out, "instance_norm", inputs, back)


# ----------------------------------------------------------------- resampling


def avg_pool2d(x, k=2):
    if x.ndim != 4:
        raise DimensionError(f"avg_pool2d expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if h % k or w % k:
        raise DimensionError(f"avg_pool2d: {h}x{w} not divisible by {k}", axis=2 if h % k else 3)
    scale = x.dtype.type(1.0 / (k * k))
    out = x.data.reshape(n, c, h // k, k, w // k, k).sum(axis=(3, 5)) * scale

    def back(g):
        return (np.repeat(np.repeat(g * scale, k, axis=2), k, axis=3),)

    return _result(out, "avg_pool2d", (x,), back)


@lru_cache(maxsize=None)
def _interp_matrix(size, factor, dtype):
    """Half-pixel bilinear interpolation weights, edges clamped."""
    out = size * factor
    m = np.zeros((out, size), dtype=np.float64)
    for o in range(out):
        src = max((o + 0.5) / factor - 0.5, 0.0)
        i0 = min(int(np.floor(src)), size - 1)
        i1 = min(i0 + 1, size - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    m = m.astype(dtype)
    m.setflags(write=False)
    return m


def bilinear_upsample(x, factor):
    """Upsample H and W by an integer factor (separable, half-pixel centres)."""
    if x.ndim != 4:
        raise DimensionError(f"bilinear_upsample expects NCHW, got {x.shape}")
    if factor == 1:
        return x
    d = x.data
    _check_finite("bilinear_upsample", d)
    mh = _interp_matrix(x.shape[2], factor, d.dtype.str)
    mw = _interp_matrix(x.shape[3], factor, d.dtype.str)
    out = np.matmul(mh, np.matmul(d, mw.T))

    def back(g):
        return (np.matmul(mh.T, np.matmul(g, mw)),)

    return _result(out, "bilinear_upsample", (x,), back)


# ---------------------------------------------------------------------- losses


def cross_entropy(logits, labels, ignore_index=255):
    """Mean pixelwise cross-entropy of NCHW logits against (N, H, W) labels.

    Pixels equal to ``ignore_index`` are skipped; with none left the result
    is exactly 0.
    """
    if logits.ndim != 4:
        raise DimensionError(f"cross_entropy expects NCHW logits, got {logits.shape}")
    labels = np.asarray(labels)
    n, k, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise DimensionError(f"labels shape {labels.shape} does not match logits {logits.shape}",
                             axis=0)
    d = logits.data
    _check_finite("cross_entropy", d)
    valid = labels != ignore_index
    if np.any(labels[valid] >= k) or np.any(labels[valid] < 0):
        raise ValueError(f"label values must lie in [0, {k}) or equal {ignore_index}")
    count = int(valid.sum())
    if count == 0:
        return _result(np.zeros((), dtype=d.dtype), "cross_entropy", (logits,),
                       lambda g: (np.zeros_like(d),))
    safe = np.where(valid, labels, 0)
    shifted = d - d.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    scale = d.dtype.type(1.0 / count)
    loss = -(picked * valid).sum(dtype=d.dtype) * scale

    def back(g):
        p = np.exp(logp)
        np.put_along_axis(p, safe[:, None], np.take_along_axis(p, safe[:, None], axis=1) - 1,
                          axis=1)
        return (p * (valid[:, None] * (g * scale)),)

    return _result(np.asarray(loss, dtype=d.dtype), "cross_entropy", (logits,), back)
