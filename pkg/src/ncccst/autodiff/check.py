"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tape, Tensor, backward


def numeric_grad(fn: Callable[[], Tensor], t: Tensor, eps: float = 1e-5, max_entries: int | None = None,
                 rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of scalar ``fn()`` w.r.t. entries of ``t``.

    Returns (flat indices probed, derivative estimates). With
    ``max_entries`` only a random subset of entries is probed.
    """
    flat = t.data.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        rng = rng or np.random.default_rng(0)
        idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
    out = np.empty(idx.size)
    for n, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(fn().data)
        flat[i] = orig - eps
        fm = float(fn().data)
        flat[i] = orig
        out[n] = (fp - fm) / (2 * eps)
    return idx, out


def gradcheck(fn: Callable[[], Tensor], inputs: dict[str, Tensor], eps: float = 1e-5,
              max_entries: int | None = None, seed: int = 0) -> dict[str, float]:
    """Relative error ||g_num - g_tape|| / max(||g_num||, ||g_tape||) per input."""
    for t in inputs.values():
        t.grad = None
    with Tape() as tape:
        loss = fn()
    backward(loss, tape)
    rng = np.random.default_rng(seed)
    errors = {}
    for name, t in inputs.items():
        analytic = np.zeros(t.size) if t.grad is None else t.grad.reshape(-1)
        idx, num = numeric_grad(fn, t, eps, max_entries, rng)
        a = analytic[idx]
        denom = max(np.linalg.norm(num), np.linalg.norm(a), 1e-30)
        errors[name] = float(np.linalg.norm(num - a) / denom)
    return errors
