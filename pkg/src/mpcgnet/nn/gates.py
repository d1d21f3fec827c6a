"""Coupling gates: binary switches deciding which branches fuse multiplicatively."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..tensor import Tensor
from ..tensor.tensor import record
from .module import Module


def _sigmoid64(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


class GateSet(Module):
    """Learnable gate logits for one fusion site of ``k`` branches.

    Entry ``(j, i)`` controls whether branch ``j`` couples into branch
    ``i``.  A gate is open iff ``sigmoid(logit) > 0.5`` (strictly), so the
    zero-initialised logits start every gate closed.  With
    ``forced_open=True`` there are no logits and every gate is open, which
    is the "fuse unconditionally" ablation.
    """

    def __init__(self, k: int, forced_open: bool = False):
        if k < 2:
            raise ValueError("a gate set needs at least two branches")
        self.k = k
        self.forced_open = forced_open
        if not forced_open:
            self.logits = Tensor(np.zeros((k, k)), requires_grad=True)

    def soft_values(self) -> np.ndarray:
        if self.forced_open:
            return np.ones((self.k, self.k))
        return _sigmoid64(self.logits.data)

    def values(self) -> np.ndarray:
        """Binary ``k × k`` gate matrix; the diagonal is reported as 0."""
        if self.forced_open:
            g = np.ones((self.k, self.k), dtype=np.int64)
        else:
            g = (self.soft_values() > 0.5).astype(np.int64)
        np.fill_diagonal(g, 0)
        return g

    def param_count(self) -> int:
        return 0 if self.forced_open else self.k * self.k


def gate_values(gates: GateSet) -> np.ndarray:
    return gates.values()


def gated_product(branches: Sequence[Tensor], gates: GateSet, i: int) -> Tensor:
    """Fused map for branch ``i``: ``M_i`` times every ``M_j`` whose gate (j→i) is open.

    The forward pass is the exact selection product.  In the backward pass
    the feature gradients are those of that product, and each logit
    receives the straight-through gradient of the soft coupling factor
    ``1 + s·(M_j − 1)`` with ``s = sigmoid(logit)``, so closed gates can
    still learn to open.
    """
    k = len(branches)
    if k != gates.k:
        raise ValueError(f"gated_product: {k} branches but the gate set has {gates.k}")
    if not 0 <= i < k:
        raise IndexError(f"gated_product: branch index {i} out of range")
    shape = branches[0].shape
    for j, b in enumerate(branches):
        if b.shape != shape:
            raise ValueError(f"gated_product: branch {j} has shape {b.shape}, expected {shape}")

    hard = gates.values()
    open_js = [j for j in range(k) if j != i and hard[j, i]]
    out = branches[i].data.copy()
    for j in open_js:
        out = out * branches[j].data

    has_logits = not gates.forced_open
    parents = tuple(branches) + ((gates.logits,) if has_logits else ())
    soft = gates.soft_values()

    def vjp(g):
        g64 = g.astype(np.float64)
        m = [b.data.astype(np.float64) for b in branches]

        def coupling(skip: int | None) -> np.ndarray:
            p = np.ones(shape)
            for j in open_js:
                if j != skip:
                    p = p * m[j]
            return p

        grads: list = [None] * k
        grads[i] = g64 * coupling(None)
        for j in open_js:
            grads[j] = g64 * m[i] * coupling(j)
        if has_logits:
            dl = np.zeros((k, k))
            for j in range(k):
                if j == i:
                    continue
                s = soft[j, i]
                dl[j, i] = s * (1.0 - s) * float((g64 * m[i] * coupling(j) * (m[j] - 1.0)).sum())
            grads.append(dl)
        return tuple(grads)

    return record("gated_product", out, parents, vjp)
