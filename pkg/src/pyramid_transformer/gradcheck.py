"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, no_grad


def grad_check(
    f: Callable[[], Tensor],
    x: Tensor,
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare the analytic gradient of scalar ``f()`` w.r.t. ``x`` to central differences.

    ``f`` takes no arguments and must read ``x.data`` (which is perturbed in
    place). Returns the max over checked coordinates of
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``. With
    ``max_coords`` set, a random subset of coordinates is checked.
    """
    if x.dtype != np.float64:
        raise ValueError("grad_check requires a float64 tensor")
    if not 1e-5 <= h <= 1e-2:
        raise ValueError(f"step h={h} outside [1e-5, 1e-2]")
    x.data = np.ascontiguousarray(x.data)
    x.grad = None
    out = f()
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    flat = x.data.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        rng = rng or np.random.default_rng(0)
        coords = rng.choice(flat.size, size=max_coords, replace=False)
    worst = 0.0
    a_flat = analytic.reshape(-1)
    for idx in coords:
        orig = flat[idx]
        with no_grad():
            flat[idx] = orig + h
            fp = f().item()
            flat[idx] = orig - h
            fm = f().item()
        flat[idx] = orig
        numeric = (fp - fm) / (2.0 * h)
        a = a_flat[idx]
        err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        worst = max(worst, err)
    return worst
