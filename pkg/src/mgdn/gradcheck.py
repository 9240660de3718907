"""Central finite-difference verification of tape gradients."""
from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from .tensor import Tensor, no_grad


class NonFiniteError(FloatingPointError):
    pass


def finite_diff_check(
    fn: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Sequence[Tensor],
    epsilon: float = 1e-6,
    max_coords: int = 8,
    seed: int = 0,
    floor: float = 1e-8,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Up to ``max_coords`` coordinates are sampled per parameter tensor. The
    error at a coordinate is |a - n| / max(|a|, |n|, floor).
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    if not isinstance(params, Mapping):
        params = {f"param{i}": p for i, p in enumerate(params)}
    rng = np.random.default_rng(seed)

    for p in params.values():
        p.grad = None
    loss = fn()
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("loss is not finite at the unperturbed point")
    loss.backward()

    worst = 0.0
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        n = p.data.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, max_coords, replace=False)
        flat = p.data.reshape(-1)
        for c in coords:
            orig = flat[c]
            with no_grad():
                flat[c] = orig + epsilon
                up = float(fn().data)
                flat[c] = orig - epsilon
                down = float(fn().data)
            flat[c] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                idx = np.unravel_index(c, p.shape)
                raise NonFiniteError(f"non-finite loss perturbing {name}{list(idx)}")
            numeric = (up - down) / (2 * epsilon)
            a = analytic.reshape(-1)[c]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return worst
