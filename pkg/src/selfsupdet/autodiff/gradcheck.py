"""Central finite-difference gradient verification (float64 only)."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def numeric_grad(fn, x: np.ndarray, step=1e-4, coords=None) -> dict[tuple, float]:
    """Central differences of scalar ``fn(x)`` at selected flat coordinates.

    ``fn`` takes a raw float64 array and returns a float. Returns a map
    from flat index to derivative estimate. ``coords=None`` checks all.
    """
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    if coords is None:
        coords = range(flat.size)
    out = {}
    for i in coords:
        orig = flat[i]
        flat[i] = orig + step
        fp = fn(x)
        flat[i] = orig - step
        fm = fn(x)
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * step)
    return out


def check_grad(build_loss, x0: np.ndarray, rtol=1e-3, step=1e-4, max_coords=32,
               rng=None, min_pass_fraction=0.95, atol=1e-7):
    """Compare autodiff gradients of ``build_loss`` against central differences.

    ``build_loss(t)`` maps a leaf Tensor to a scalar Tensor. Passes when at
    least ``min_pass_fraction`` of the sampled coordinates agree within
    ``rtol`` relative error (absolute slack ``atol`` for near-zero pairs).
    Returns (ok, worst_relative_error).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True, dtype=np.float64)
    loss = build_loss(leaf)
    loss.backward()
    if leaf.grad is None:
        raise AssertionError("no gradient reached the leaf under test")
    analytic = leaf.grad.reshape(-1)

    n = x0.size
    if n > max_coords:
        rng = rng or np.random.default_rng(0)
        coords = rng.choice(n, size=max_coords, replace=False)
    else:
        coords = np.arange(n)

    def fn(arr):
        return float(build_loss(Tensor(arr, dtype=np.float64)).data)

    numeric = numeric_grad(fn, x0, step=step, coords=coords)
    worst = 0.0
    failures = 0
    for i, num in numeric.items():
        ana = analytic[i]
        denom = max(abs(num), abs(ana))
        if denom < atol:
            continue
        rel = abs(num - ana) / denom
        worst = max(worst, rel)
        if rel > rtol:
            failures += 1
    ok = failures <= (1.0 - min_pass_fraction) * len(numeric)
    return ok, worst
