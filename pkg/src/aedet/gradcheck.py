"""Central-difference gradient checking against :func:`aedet.tensor.backward`."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import ConfigError, NumericError
from .tensor import Tensor, backward


def finite_diff_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-6) -> float:
    """Max relative error between the analytic and numeric gradient of ``f`` at ``x``.

    ``f`` maps a tensor to a scalar tensor. The check runs in float64; the relative
    error per element is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ConfigError(f"eps must lie in [1e-7, 1e-4], got {eps}")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)

    xt = Tensor(base.copy(), requires_grad=True)
    out = f(xt)
    backward(out)
    analytic = np.zeros_like(base) if xt.grad is None else xt.grad

    numeric = np.empty_like(base)
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        hi, lo = orig + eps, orig - eps
        flat[i] = hi
        fp = _scalar(f, base)
        flat[i] = lo
        fm = _scalar(f, base)
        flat[i] = orig
        # divide by the step actually taken, not the nominal 2*eps
        numeric.reshape(-1)[i] = (fp - fm) / (hi - lo)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0


def _scalar(f, arr: np.ndarray) -> float:
    val = float(f(Tensor(arr.copy())).data)
    if not np.isfinite(val):
        raise NumericError("function under gradient check returned a non-finite value")
    return val
