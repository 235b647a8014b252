"""Times the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Shapes match one vit_tiny / cnn_tiny training step at batch 32 on 64x64
images. Both backends are checked for agreement before timing.
"""

import argparse
import timeit

import numpy as np

from mtclip.tensor import _fallback
from mtclip.tensor.kernels import compiled_module


def cases(rng):
    x = rng.normal(size=(32, 16, 32, 32))
    cols = _fallback.im2col(x, 3, 1, 1)
    logits = rng.normal(size=(32, 9, 16, 16))
    target = rng.integers(0, 9, size=(32, 16, 16)).astype(np.int64)
    tokens = rng.normal(size=(32 * 65, 128))
    gain, bias = rng.normal(size=128), rng.normal(size=128)
    _, xhat, inv = _fallback.layer_norm_forward(tokens, gain, bias, 1e-5)
    return {
        "im2col 3x3": ("im2col", (x, 3, 1, 1)),
        "col2im 3x3": ("col2im", (cols, 32, 16, 32, 32, 3, 1, 1)),
        "upsample x4": ("upsample_nearest", (logits, 64, 64)),
        "upsample backward": ("upsample_nearest_backward", (rng.normal(size=(32, 9, 64, 64)), 16, 16)),
        "adaptive pool 6x6": ("adaptive_avg_pool", (x, 6, 6)),
        "adaptive pool backward": ("adaptive_avg_pool_backward", (rng.normal(size=(32, 16, 6, 6)), 32, 32)),
        "softmax xent": ("softmax_xent_nchw", (logits, target, 255)),
        "gelu": ("gelu", (tokens.reshape(-1) * 1.0, True)),
        "layer norm forward": ("layer_norm_forward", (tokens, gain, bias, 1e-5)),
        "layer norm backward": ("layer_norm_backward", (rng.normal(size=tokens.shape), xhat, inv, gain)),
    }


def _flat(out):
    if isinstance(out, tuple):
        return [np.asarray(o) for o in out if o is not None]
    return [np.asarray(out)]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    compiled = compiled_module()
    if compiled is None:
        print("compiled kernels are not built; nothing to compare")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':<24}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}  max|diff|")
    for name, (fn, a) in cases(rng).items():
        f_py, f_c = getattr(_fallback, fn), getattr(compiled, fn)
        diff = max(float(np.max(np.abs(p - c))) if p.size else 0.0
                   for p, c in zip(_flat(f_py(*a)), _flat(f_c(*a))))
        t_py = min(timeit.repeat(lambda: f_py(*a), number=1, repeat=args.repeat)) * 1e3
        t_c = min(timeit.repeat(lambda: f_c(*a), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<24}{t_py:>10.2f}{t_c:>11.2f}{t_py / t_c:>8.1f}x  {diff:.1e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
