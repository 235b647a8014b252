"""Pure-numpy implementations of the hot kernels.

Signatures mirror ``_kernels.pyx`` exactly; ``mtclip.tensor.kernels`` picks
one at import. All inputs are C-contiguous float64 arrays (int64 for class
targets).
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def nearest_index(n_in, n_out):
    return (np.arange(n_out, dtype=np.int64) * n_in) // n_out


def bin_edges(n_in, n_out):
    i = np.arange(n_out + 1, dtype=np.int64)
    return (i * n_in) // n_out


def _pool_matrix(n_in, n_out):
    edges = bin_edges(n_in, n_out)
    mat = np.zeros((n_out, n_in))
    for o in range(n_out):
        lo, hi = edges[o], edges[o + 1]
        mat[o, lo:hi] = 1.0 / (hi - lo)
    return mat


def _select_matrix(n_in, n_out):
    mat = np.zeros((n_out, n_in))
    mat[np.arange(n_out), nearest_index(n_in, n_out)] = 1.0
    return mat


def im2col(x, k, stride, pad):
    b, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # (B, C, Ho, Wo, k, k) -> (B, C, k, k, Ho, Wo)
    cols = win.transpose(0, 1, 4, 5, 2, 3)
    return np.ascontiguousarray(cols).reshape(b, c * k * k, ho * wo)


def col2im(cols, b, c, h, w, k, stride, pad):
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    cols = cols.reshape(b, c, k, k, ho, wo)
    out = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    for ki in range(k):
        for kj in range(k):
            out[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += cols[:, :, ki, kj]
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(out)


def upsample_nearest(x, out_h, out_w):
    iy = nearest_index(x.shape[2], out_h)
    ix = nearest_index(x.shape[3], out_w)
    return np.ascontiguousarray(x[:, :, iy[:, None], ix[None, :]])


def upsample_nearest_backward(g, h, w):
    sy = _select_matrix(h, g.shape[2])
    sx = _select_matrix(w, g.shape[3])
    return np.ascontiguousarray(np.matmul(np.matmul(sy.T, g), sx))


def adaptive_avg_pool(x, out_h, out_w):
    ph = _pool_matrix(x.shape[2], out_h)
    pw = _pool_matrix(x.shape[3], out_w)
    return np.ascontiguousarray(np.matmul(np.matmul(ph, x), pw.T))


def adaptive_avg_pool_backward(g, h, w):
    ph = _pool_matrix(h, g.shape[2])
    pw = _pool_matrix(w, g.shape[3])
    return np.ascontiguousarray(np.matmul(np.matmul(ph.T, g), pw))


def softmax_xent_nchw(logits, target, ignore_id):
    """Summed per-pixel cross-entropy and its unscaled gradient.

    Returns ``(loss_sum, count, grad)`` where ``grad`` is softmax minus one-hot
    at counted pixels and zero at ignored ones.
    """
    b, c, h, w = logits.shape
    valid = target != ignore_id
    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    denom = expd.sum(axis=1, keepdims=True)
    prob = expd / denom
    safe = np.where(valid, target, 0)
    picked = np.take_along_axis(shifted, safe[:, None], axis=1)[:, 0]
    nll = np.log(denom[:, 0]) - picked
    count = int(valid.sum())
    loss_sum = float(nll[valid].sum())
    onehot_rows = np.zeros_like(prob)
    np.put_along_axis(onehot_rows, safe[:, None], 1.0, axis=1)
    grad = (prob - onehot_rows) * valid[:, None]
    return loss_sum, count, np.ascontiguousarray(grad)


_GELU_C = 0.7978845608028654


def gelu(x, want_grad):
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * x2 * x))
    out = 0.5 * x * (1.0 + t)
    if not want_grad:
        return out, None
    deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x2)
    return out, deriv


def layer_norm_forward(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1) + eps)
    xhat = xc * inv[:, None]
    return xhat * gain + bias, xhat, inv


def layer_norm_backward(g, xhat, inv, gain):
    d = g.shape[1]
    gh = g * gain
    s1 = gh.sum(axis=1, keepdims=True)
    s2 = (gh * xhat).sum(axis=1, keepdims=True)
    return inv[:, None] / d * (d * gh - s1 - xhat * s2)
