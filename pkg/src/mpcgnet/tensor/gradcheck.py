"""Central finite-difference oracle for tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import ops
from .tensor import Tape, Tensor


def _objective(y: Tensor, probe: np.ndarray) -> float:
    return float((y.data.astype(np.float64) * probe).sum())


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float | None = None,
    params: Sequence[Tensor] = (),
    max_elems: int | None = None,
    seed: int = 0,
) -> float:
    """Worst relative error between tape and central-difference gradients.

    The output of ``f`` is contracted with a fixed random probe ``r`` so the
    check compares a vector-Jacobian product, ``d<r, f(x)>/dx``.  Gradients
    are checked for ``x`` and every tensor in ``params``; with ``max_elems``
    only a seeded random subset of each tensor's entries is probed.

    The default step is 1e-4 for float64 inputs (small enough that max-type
    reductions rarely switch their argmax inside the stencil) and 1e-2 for
    float32.

    Per element the error is ``|a - n| / max(|a|, |n|, floor)`` where the
    floor is 1e-3 of the largest numeric gradient magnitude, so entries
    with negligible gradient cannot dominate through cancellation noise.
    """
    if h is None:
        h = 1e-4 if x.dtype == np.float64 else 1e-2
    rng = np.random.default_rng(seed)
    targets = [x, *params]
    saved_flags = [t.requires_grad for t in targets]
    saved_grads = [t.grad for t in targets]
    for t in targets:
        t.requires_grad = True
        t.grad = None
    try:
        with Tape() as tape:
            y = f(x)
            probe = rng.standard_normal(y.shape)
            loss = ops.sum_all(ops.mul(y, Tensor(probe, dtype=y.dtype)))
        tape.backward(loss)

        analytic, numeric = [], []
        for t in targets:
            grad = np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64)
            flat = t.data.reshape(-1)
            picks = np.arange(flat.size)
            if max_elems is not None and flat.size > max_elems:
                picks = np.sort(rng.choice(flat.size, size=max_elems, replace=False))
            for i in picks:
                orig = flat[i].copy()
                flat[i] = orig + h
                fp = _objective(f(x), probe)
                flat[i] = orig - h
                fm = _objective(f(x), probe)
                flat[i] = orig
                numeric.append((fp - fm) / (2.0 * h))
                analytic.append(grad.reshape(-1)[i])
    finally:
        for t, flag, g in zip(targets, saved_flags, saved_grads):
            t.requires_grad = flag
            t.grad = g

    a = np.asarray(analytic)
    n = np.asarray(numeric)
    if a.size == 0:
        return 0.0
    floor = max(1e-3 * np.abs(n).max(), 1e-12)
    err = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(err.max())
