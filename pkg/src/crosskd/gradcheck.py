"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numeric_grad(fn: Callable[[], Tensor], param: Tensor, step: float = 1e-5, indices=None) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. entries of ``param``.

    Only the flat positions in ``indices`` are perturbed (all when None);
    the rest of the returned array is NaN.
    """
    flat = param.data.reshape(-1)
    out = np.full(flat.shape, np.nan)
    positions = range(flat.size) if indices is None else indices
    for i in positions:
        orig = flat[i]
        flat[i] = orig + step
        up = fn().item()
        flat[i] = orig - step
        down = fn().item()
        flat[i] = orig
        out[i] = (up - down) / (2.0 * step)
    return out.reshape(param.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """``||a - n|| / max(||a||, ||n||, floor)`` over the finite entries of ``numeric``."""
    mask = np.isfinite(numeric)
    a, n = analytic[mask], numeric[mask]
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / scale)


def _straddles_kink(fn, flat, i, step, tol) -> bool:
    """True when the second difference at entry ``i`` is too large for a smooth
    function, i.e. a ReLU-type kink lies within ``step`` of the point."""
    orig = flat[i]
    centre = fn().item()
    flat[i] = orig + step
    up = fn().item()
    flat[i] = orig - step
    down = fn().item()
    flat[i] = orig
    return abs(up + down - 2.0 * centre) > tol


def check_gradients(
    fn: Callable[[], Tensor],
    params: Sequence[tuple[str, Tensor]],
    step: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    kink_tol: float | None = None,
    skipped: dict | None = None,
) -> dict[str, float]:
    """Backprop once, then compare each parameter's gradient with central differences.

    ``fn`` must be deterministic (fix any random masks before calling).
    With ``max_entries`` a random subset of each tensor's entries is probed.
    With ``kink_tol`` entries whose second difference exceeds it are replaced
    by other entries (finite differences are meaningless across a kink); the
    count per parameter goes into ``skipped`` when given.
    Returns the relative error per parameter name.
    """
    for _, p in params:
        p.grad = None
    fn().backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros(p.shape)) for name, p in params}
    rng = rng or np.random.default_rng(0)
    errors = {}
    for name, p in params:
        order = rng.permutation(p.size)
        want = p.size if max_entries is None else min(max_entries, p.size)
        if kink_tol is None:
            indices = order[:want] if max_entries is not None else None
            n_skipped = 0
        else:
            flat = p.data.reshape(-1)
            indices, n_skipped = [], 0
            for i in order:
                if len(indices) == want:
                    break
                if _straddles_kink(fn, flat, i, step, kink_tol):
                    n_skipped += 1
                else:
                    indices.append(int(i))
        if skipped is not None:
            skipped[name] = n_skipped
        numeric = numeric_grad(fn, p, step, indices)
        errors[name] = relative_error(analytic[name], numeric)
    return errors
