"""Central finite-difference verification of tape gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, current_tape, no_grad


def numeric_grad(fn: Callable[[], Tensor], param: Tensor, coords: Sequence[tuple],
                 h: float = 1e-6) -> np.ndarray:
    out = np.empty(len(coords))
    with no_grad():
        for n, idx in enumerate(coords):
            orig = param.data[idx]
            param.data[idx] = orig + h
            up = fn().item()
            param.data[idx] = orig - h
            down = fn().item()
            param.data[idx] = orig
            out[n] = (up - down) / (2.0 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, atol: float = 1e-8) -> float:
    """Norm-wise ``|a - n| / max(|a|, |n|)``.

    Returns 0 when both norms are below ``atol``: gradients that vanish
    analytically (e.g. a key bias under softmax) leave only rounding noise
    in the central difference, and a ratio of two noise terms means nothing.
    """
    a, n = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < atol:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def gradcheck(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-6,
              max_coords: int | None = 24, seed: int = 0) -> float:
    """Worst relative error over ``params`` between backward and central differences.

    ``fn`` must rebuild the scalar loss from the current parameter values.
    With ``max_coords`` set, each parameter is probed at that many random
    coordinates instead of all of them.
    """
    rng = np.random.default_rng(seed)
    current_tape().clear()
    for p in params:
        p.grad = None
    backward(fn())
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = list(np.ndindex(p.shape)) if p.ndim else [()]
        if max_coords is not None and len(flat) > max_coords:
            pick = rng.choice(len(flat), size=max_coords, replace=False)
            flat = [flat[i] for i in sorted(pick)]
        numeric = numeric_grad(fn, p, flat, h)
        got = np.array([analytic[i] for i in flat])
        worst = max(worst, relative_error(got, numeric))
    return worst
