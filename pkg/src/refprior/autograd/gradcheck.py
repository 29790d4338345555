"""Gradient utilities: explicit backward and central finite differences."""

import numpy as np

from ..errors import NumericalError, ShapeError
from .tensor import Tensor, no_grad


def backward(loss, params):
    """Run reverse mode from a scalar ``loss``; return ``{name: grad}``.

    ``params`` is a name -> Tensor mapping (or a list, keyed by index).
    Existing gradients are cleared first, and parameters the loss does not
    depend on receive zeros.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = getattr(loss, "shape", None)
        raise ShapeError(f"backward requires a scalar loss tensor, got shape {shape}")
    if not isinstance(params, dict):
        params = dict(enumerate(params))
    for p in params.values():
        p.grad = None
    if loss.requires_grad:
        loss.backward()
    return {
        k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for k, p in params.items()
    }


RELATIVE_FLOOR = 1e-8


def relative_error(g_ad, g_fd, floor=RELATIVE_FLOOR):
    denom = np.maximum(np.maximum(np.abs(g_ad), np.abs(g_fd)), floor)
    return np.abs(g_ad - g_fd) / denom


def numerical_gradient(f, param, eps=1e-5, indices=None):
    flat = param.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    idx = range(flat.size) if indices is None else indices
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f().data)
            flat[i] = orig - eps
            fm = float(f().data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericalError(f"non-finite objective at perturbed element {i}")
            out[i] = (fp - fm) / (2.0 * eps)
    return out.reshape(param.shape)


def finite_difference_check(f, params, eps=1e-5, max_elements=None, rng=None, floor=RELATIVE_FLOOR):
    """Max elementwise relative error between reverse-mode and central differences.

    ``f`` is a zero-argument callable returning a scalar Tensor computed from
    the current values of ``params`` (a name -> Tensor mapping or list). With
    ``max_elements`` set, that many entries per parameter are sampled using
    ``rng`` instead of checking every entry. The relative error of each entry
    is ``|g_ad - g_fd| / max(|g_ad|, |g_fd|, floor)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not isinstance(params, dict):
        params = dict(enumerate(params))
    analytic = backward(f(), params)
    worst = 0.0
    for name, p in params.items():
        indices = None
        if max_elements is not None and p.size > max_elements:
            rng = rng or np.random.default_rng(0)
            indices = rng.choice(p.size, size=max_elements, replace=False)
        numeric = numerical_gradient(f, p, eps, indices)
        g = analytic[name].astype(np.float64)
        if indices is not None:
            g, numeric = g.reshape(-1)[indices], numeric.reshape(-1)[indices]
        if g.size:
            worst = max(worst, float(relative_error(g, numeric, floor).max()))
    return worst
