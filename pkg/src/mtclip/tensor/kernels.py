"""Selects the compiled kernel module when available, else the numpy fallback.

Set ``MTCLIP_KERNELS=python`` to force the fallback (benchmarks and the
cross-backend tests use this).
"""

import os

from mtclip.tensor import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("MTCLIP_KERNELS", "auto").lower() != "python":
    try:
        from mtclip.tensor import _kernels as _compiled
    except ImportError:
        _compiled = None
    else:
        _impl = _compiled
        BACKEND = "cython"
else:
    _compiled = None


def compiled_module():
    """The compiled extension module, or None when it is not built."""
    if _compiled is not None:
        return _compiled
    try:
        from mtclip.tensor import _kernels
    except ImportError:
        return None
    return _kernels


def _c(x):
    return x if x.flags.c_contiguous else x.copy(order="C")


def im2col(x, k, stride, pad):
    return _impl.im2col(_c(x), k, stride, pad)


def col2im(cols, b, c, h, w, k, stride, pad):
    return _impl.col2im(_c(cols), b, c, h, w, k, stride, pad)


def upsample_nearest(x, out_h, out_w):
    return _impl.upsample_nearest(_c(x), out_h, out_w)


def upsample_nearest_backward(g, h, w):
    return _impl.upsample_nearest_backward(_c(g), h, w)


def adaptive_avg_pool(x, out_h, out_w):
    return _impl.adaptive_avg_pool(_c(x), out_h, out_w)


def adaptive_avg_pool_backward(g, h, w):
    return _impl.adaptive_avg_pool_backward(_c(g), h, w)


def softmax_xent_nchw(logits, target, ignore_id):
    return _impl.softmax_xent_nchw(_c(logits), _c(target.astype("int64", copy=False)), int(ignore_id))


def gelu(x, want_grad):
    """Elementwise tanh-GELU on a flat array; also returns d(out)/dx when asked."""
    return _impl.gelu(_c(x), bool(want_grad))


def layer_norm_forward(x, gain, bias, eps):
    """Row-wise layer norm of a (N, D) array. Returns ``(out, xhat, inv_std)``."""
    return _impl.layer_norm_forward(_c(x), _c(gain), _c(bias), float(eps))


def layer_norm_backward(g, xhat, inv, gain):
    return _impl.layer_norm_backward(_c(g), _c(xhat), _c(inv), _c(gain))
