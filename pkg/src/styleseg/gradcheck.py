"""Central finite-difference checks for the reverse-mode engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def numerical_gradient(loss_fn: Callable[[], Tensor], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss_fn()`` with respect to every entry of ``param``."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            grad.reshape(-1)[i] = (up - down) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps parameters whose true gradient is zero (a conv bias
    feeding instance norm, say) from being judged on finite-difference
    round-off alone. Central differences of an O(1) loss with h=1e-5 carry
    roughly 1e-11 of noise per entry, so the floor sits well above that and
    well below any gradient that matters.
    """
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(diff / scale)


def check_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor] | dict[str, Tensor],
                    h: float = 1e-5) -> dict[str, float]:
    """Compare ``backward()`` against finite differences for each parameter.

    Returns a mapping from parameter name (or position) to relative error.
    """
    named = params.items() if isinstance(params, dict) else ((p.name or str(i), p) for i, p in enumerate(params))
    named = list(named)
    for _, p in named:
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    errors = {}
    for name, p in named:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        errors[name] = relative_error(analytic, numerical_gradient(loss_fn, p, h))
    return errors
