"""Differentiable primitives.

Each function computes its forward value with numpy and registers a backward
closure through :func:`make_node`. Binary elementwise ops broadcast like
numpy; their gradients are summed back to each operand's shape.
"""

from __future__ import annotations

import math

import numpy as np

from mtclip.errors import ArgumentError, DimensionError
from mtclip.tensor import kernels
from mtclip.tensor.core import DTYPE, Tensor, as_tensor, is_grad_enabled, make_node


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return make_node(out, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return make_node(out, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_node(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    out = a.data ** p
    return make_node(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return make_node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return make_node(out, (a,), lambda g: (g * 0.5 / out,))


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    return make_node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_node(a.data * mask, (a,), lambda g: (g * mask,))


def gelu(a) -> Tensor:
    """Tanh-approximated GELU."""
    a = as_tensor(a)
    want = a.requires_grad and is_grad_enabled()
    out, deriv = kernels.gelu(a.data.reshape(-1), want)
    out = out.reshape(a.shape)
    if deriv is not None:
        deriv = deriv.reshape(a.shape)
    return make_node(out, (a,), lambda g: (g * deriv,))


def arccos(a) -> Tensor:
    """arccos of the input clamped to [-1, 1].

    The gradient is zero where the clamp is active and uses a floor of 1e-12
    under the square root so it stays finite at the boundary.
    """
    a = as_tensor(a)
    clipped = np.clip(a.data, -1.0, 1.0)
    out = np.arccos(clipped)

    def backward(g):
        inside = (a.data > -1.0) & (a.data < 1.0)
        return (-g * inside / np.sqrt(np.maximum(1.0 - clipped * clipped, 1e-12)),)

    return make_node(out, (a,), backward)


# --------------------------------------------------------------------------
# reductions and shape
# --------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_node(np.asarray(out), (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return make_node(np.asarray(out), (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return make_node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def index(a, idx) -> Tensor:
    """Basic or advanced indexing; advanced indices scatter back with ``np.add.at``."""
    a = as_tensor(a)
    out = a.data[idx]
    parts = idx if isinstance(idx, tuple) else (idx,)
    advanced = any(isinstance(p, (np.ndarray, list)) for p in parts)

    def backward(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        if advanced:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return make_node(np.array(out, dtype=DTYPE), (a,), backward)


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return make_node(out, tuple(tensors), backward)


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not broadcast") from exc

    def backward(g):
        ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), backward)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data.T
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)
    out = out.reshape(lead + (weight.shape[0],))

    def backward(g):
        g2 = g.reshape(-1, weight.shape[0])
        gx = (g2 @ weight.data).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0) if bias.requires_grad else None)
        return grads

    return make_node(out, parents, backward)


# --------------------------------------------------------------------------
# normalisation and activations over an axis
# --------------------------------------------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    """Softmax with max subtraction."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (x,), backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_node(out, (x,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match last axis {n}")
    out, xhat, inv = kernels.layer_norm_forward(x.data.reshape(-1, n), gain.data, bias.data, eps)

    def backward(g):
        g2 = g.reshape(-1, n)
        gx = kernels.layer_norm_backward(g2, xhat, inv, gain.data).reshape(x.shape) if x.requires_grad else None
        ggain = (g2 * xhat).sum(axis=0) if gain.requires_grad else None
        gbias = g2.sum(axis=0) if bias.requires_grad else None
        return gx, ggain, gbias

    return make_node(out.reshape(x.shape), (x, gain, bias), backward)


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """``x / max(||x||, eps)`` along ``axis``."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    out = x.data / denom

    def backward(g):
        active = norm > eps
        proj = (g * out).sum(axis=axis, keepdims=True)
        return ((g - out * proj * active) / denom,)

    return make_node(out, (x,), backward)


# --------------------------------------------------------------------------
# lookup and attention
# --------------------------------------------------------------------------

def embedding(weight, ids: np.ndarray) -> Tensor:
    weight = as_tensor(weight)
    ids = np.asarray(ids, dtype=np.int64)
    out = weight.data[ids]

    def backward(g):
        full = np.zeros(weight.shape, dtype=DTYPE)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (full,)

    return make_node(out, (weight,), backward)


def scaled_dot_product_attention(q, k, v, mask=None) -> Tensor:
    """softmax(q kᵀ / sqrt(d) + mask) v over the last two axes.

    ``mask`` is an additive constant array (0 keep, large negative drop).
    """
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = matmul(q, transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))) * scale
    if mask is not None:
        scores = scores + Tensor(mask)
    return matmul(softmax(scores, axis=-1), v)


# --------------------------------------------------------------------------
# spatial ops (NCHW)
# --------------------------------------------------------------------------

def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. ``weight`` is (out, in, k, k) with odd ``k``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {weight.shape}")
    b, c, h, w = x.shape
    o, ci, k, k2 = weight.shape
    if ci != c:
        raise DimensionError(f"conv2d: input has {c} channels but kernel {weight.shape} expects {ci}")
    if k != k2 or k % 2 == 0:
        raise ArgumentError(f"conv2d: kernel must be square with odd size, got {weight.shape}")
    if stride < 1 or padding < 0:
        raise ArgumentError(f"conv2d: invalid stride={stride} padding={padding}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: input {x.shape} too small for kernel {k} with padding {padding}")
    w2 = weight.data.reshape(o, c * k * k)
    pointwise = k == 1 and stride == 1 and padding == 0
    if pointwise:
        cols = x.data.reshape(b, c, h * w)
    else:
        cols = kernels.im2col(x.data, k, stride, padding)
    out = np.matmul(w2, cols)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, o, 1)
    out = out.reshape(b, o, ho, wo)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g3 = g.reshape(b, o, ho * wo)
        gx = gw = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, g3)
            gx = gcols.reshape(x.shape) if pointwise else kernels.col2im(gcols, b, c, h, w, k, stride, padding)
        if weight.requires_grad:
            gw = np.tensordot(g3, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        if bias is None:
            return gx, gw
        gb = g3.sum(axis=(0, 2)) if bias.requires_grad else None
        return gx, gw, gb

    return make_node(out, parents, backward)


def adaptive_avg_pool2d(x, out_h: int, out_w: int) -> Tensor:
    """Mean over contiguous bins ``[floor(i*H/out), floor((i+1)*H/out))`` that partition the input."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"adaptive_avg_pool2d: expected 4-D input, got {x.shape}")
    h, w = x.shape[2:]
    if out_h < 1 or out_w < 1:
        raise ArgumentError(f"adaptive_avg_pool2d: output extent must be positive, got ({out_h}, {out_w})")
    if out_h > h or out_w > w:
        raise ArgumentError(f"adaptive_avg_pool2d: output ({out_h}, {out_w}) exceeds input ({h}, {w})")
    out = kernels.adaptive_avg_pool(x.data, out_h, out_w)
    return make_node(out, (x,), lambda g: (kernels.adaptive_avg_pool_backward(g, h, w),))


def nearest_upsample(x, out_h: int, out_w: int) -> Tensor:
    """``out[y, x] = in[floor(y*h/out_h), floor(x*w/out_w)]``."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"nearest_upsample: expected 4-D input, got {x.shape}")
    h, w = x.shape[2:]
    if out_h < h or out_w < w:
        raise ArgumentError(f"nearest_upsample: output ({out_h}, {out_w}) smaller than input ({h}, {w})")
    if (out_h, out_w) == (h, w):
        return make_node(x.data.copy(), (x,), lambda g: (g,))
    out = kernels.upsample_nearest(x.data, out_h, out_w)
    return make_node(out, (x,), lambda g: (kernels.upsample_nearest_backward(g, h, w),))


# --------------------------------------------------------------------------
# fused losses
# --------------------------------------------------------------------------

def cross_entropy(logits, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy of (N, C) logits against integer targets."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    logp = log_softmax(logits, axis=-1)
    picked = index(logp, (np.arange(len(targets)), targets))
    return neg(mean(picked))


def cross_entropy_map(logits, target: np.ndarray, ignore_id: int):
    """Mean per-pixel cross-entropy of (B, C, H, W) logits over non-ignored pixels.

    Returns ``(loss, count)``. With no counted pixels the loss is 0 and carries
    no gradient.
    """
    logits = as_tensor(logits)
    if logits.ndim != 4 or target.shape != (logits.shape[0],) + logits.shape[2:]:
        raise DimensionError(f"cross_entropy_map: logits {logits.shape} vs mask {target.shape}")
    loss_sum, count, grad = kernels.softmax_xent_nchw(logits.data, np.asarray(target), ignore_id)
    if count == 0:
        return make_node(np.zeros(()), (logits,), lambda g: (np.zeros(logits.shape),)), 0
    scale = 1.0 / count
    return make_node(np.asarray(loss_sum * scale), (logits,), lambda g: (grad * (g * scale),)), count


def cross_entropy_counts(logits, counts: np.ndarray):
    """Cross-entropy of (B, C, h, w) logits against per-cell class counts.

    ``counts[b, c, y, x]`` is how many target pixels of class ``c`` read their
    prediction from cell ``(y, x)``. The result is the mean over all counted
    pixels, which equals the per-pixel cross-entropy of the nearest-upsampled
    logits without building the upsampled map. Returns ``(loss, count)``.
    """
    logits = as_tensor(logits)
    counts = np.asarray(counts, dtype=np.float64)
    if counts.shape != logits.shape or logits.ndim != 4:
        raise DimensionError(f"cross_entropy_counts: logits {logits.shape} vs counts {counts.shape}")
    total = counts.sum()
    if total == 0:
        return make_node(np.zeros(()), (logits,), lambda g: (np.zeros(logits.shape),)), 0
    x = logits.data
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=1, keepdims=True)
    logp = shifted - np.log(z)
    loss = -(counts * logp).sum() / total
    per_cell = counts.sum(axis=1, keepdims=True)

    def backward(g):
        return ((e / z * per_cell - counts) * (g / total),)

    return make_node(np.asarray(loss), (logits,), backward), int(total)
