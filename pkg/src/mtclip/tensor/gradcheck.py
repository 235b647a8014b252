"""Central finite-difference checks for analytic gradients."""

from typing import Callable, Dict, Optional, Sequence

import numpy as np

from mtclip.tensor.core import Tensor


def numerical_grad(fn: Callable[[], Tensor], param: Tensor, coords: Sequence[int], eps: float = 1e-5,
                   kink_tol: Optional[float] = None, min_eps: float = 1e-8):
    """Central differences of ``fn()`` w.r.t. the flat ``coords`` of ``param``.

    With ``kink_tol`` set, a coordinate whose second difference
    ``|f(x+h) - 2 f(x) + f(x-h)|`` exceeds ``kink_tol * |f(x+h) - f(x-h)|`` is
    treated as straddling a ReLU or abs kink and retried with ``h / 10``,
    down to ``min_eps``. Second differences within a few hundred ulps of
    ``f(x)`` are rounding noise and never trigger a retry. Only function
    values decide this.
    """
    flat = param.data.reshape(-1)
    out = np.empty(len(coords))
    f0 = fn().item() if kink_tol is not None else 0.0
    noise = 256 * np.spacing(abs(f0))
    for j, c in enumerate(coords):
        orig = flat[c]
        h = eps
        while True:
            flat[c] = orig + h
            hi = fn().item()
            flat[c] = orig - h
            lo = fn().item()
            flat[c] = orig
            if kink_tol is None or h / 10 < min_eps or abs(hi - 2 * f0 + lo) <= max(kink_tol * abs(hi - lo), noise):
                break
            h /= 10
        out[j] = (hi - lo) / (2 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|, floor)``."""
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(diff / scale)


def check_gradients(
    fn: Callable[[], Tensor],
    params: Dict[str, Tensor],
    eps: float = 1e-5,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    kink_tol: Optional[float] = None,
) -> Dict[str, float]:
    """Relative error between backprop and finite differences for each parameter.

    When ``max_coords`` is set, only that many coordinates of each parameter
    are compared: half are those with the largest analytic magnitude, the rest
    are drawn at random from the remainder. Sparse gradients (embedding rows
    that no token touches) would otherwise yield all-zero samples whose
    "relative" error is pure rounding noise.
    """
    for p in params.values():
        p.grad = None
    fn().backward()
    rng = rng or np.random.default_rng(0)
    errors = {}
    for name, p in params.items():
        n = p.data.size
        full = (p.grad if p.grad is not None else np.zeros(p.shape)).reshape(-1)
        if max_coords is not None and n > max_coords:
            top = np.argsort(-np.abs(full), kind="stable")[: max_coords // 2]
            rest = np.setdiff1d(np.arange(n), top)
            coords = np.sort(np.concatenate([top, rng.choice(rest, size=max_coords - len(top), replace=False)]))
        else:
            coords = np.arange(n)
        analytic = full[coords]
        numeric = numerical_grad(fn, p, coords, eps, kink_tol)
        errors[name] = relative_error(analytic, numeric)
    return errors
