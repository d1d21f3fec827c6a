"""Finite-difference gradient checks for every block, in float64 shadow precision.

Each check builds a small seeded instance, freezes any gate logits at
random ±1 (the hard threshold is not differentiable, so gate logits are
checked separately through their straight-through path) and returns the
worst relative error over the input and a sample of parameter entries.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .network import Interaction, MPCGNet, NetConfig
from .nn import CGMFEBlock, ChannelAttention, DFABlock, ISBlock, SpatialAttention, WCADBlock
from .tensor import Tensor, finite_diff_check, precision

BLOCK_TOL = 1e-2
NET_TOL = 2e-2
SMALL_NET = dict(widths=(8, 16, 24, 32), decoder_width=8, heads=2, window=2, reduction=4)


def _rand(rng, shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), dtype=np.float64)


def _freeze_gates(module, rng) -> list[Tensor]:
    """Set gate logits to random ±1 and return the remaining parameters."""
    keep = []
    for name, p in module.named_parameters():
        if "gates" in name:
            p.data[:] = rng.choice([-1.0, 1.0], size=p.shape)
        else:
            keep.append(p)
    return keep


def check_is(seed: int) -> float:
    rng = np.random.default_rng(seed)
    blk = ISBlock(8, 8, rng).astype(np.float64)
    x = _rand(rng, (1, 8, 16, 16))
    return finite_diff_check(blk, x, params=blk.parameters(), max_elems=40, seed=seed)


def check_cgmfe(seed: int) -> float:
    rng = np.random.default_rng(seed)
    blk = CGMFEBlock(4, 4, rng).astype(np.float64)
    params = _freeze_gates(blk, rng)
    x = _rand(rng, (1, 4, 8, 8))
    return finite_diff_check(blk, x, params=params, max_elems=30, seed=seed)


def check_wcad(seed: int) -> float:
    rng = np.random.default_rng(seed)
    blk = WCADBlock(16, 32, 16, rng, dim=16, heads=4, window=4).astype(np.float64)
    shallow = _rand(rng, (1, 16, 16, 16))
    deep = _rand(rng, (1, 32, 8, 8))
    e1 = finite_diff_check(lambda s: blk(s, deep), shallow, params=blk.parameters(), max_elems=25, seed=seed)
    e2 = finite_diff_check(lambda d: blk(shallow, d), deep, max_elems=25, seed=seed)
    return max(e1, e2)


def check_dfa(seed: int) -> float:
    rng = np.random.default_rng(seed)
    blk = DFABlock([8, 8, 8], 8, 8, rng, reduction=4).astype(np.float64)
    params = _freeze_gates(blk, rng)
    feats = [_rand(rng, (1, 8, 16, 16)) for _ in range(3)]
    return finite_diff_check(lambda f0: blk([f0, feats[1], feats[2]]), feats[0], params=params,
                             max_elems=25, seed=seed)


def check_chatt(seed: int) -> float:
    rng = np.random.default_rng(seed)
    blk = ChannelAttention(8, rng, reduction=4).astype(np.float64)
    x = _rand(rng, (2, 8, 6, 6))
    return finite_diff_check(blk, x, params=blk.parameters(), max_elems=40, seed=seed)


def check_spatt(seed: int) -> float:
    rng = np.random.default_rng(seed)
    blk = SpatialAttention(rng).astype(np.float64)
    x = _rand(rng, (2, 8, 6, 6))
    return finite_diff_check(blk, x, params=blk.parameters(), max_elems=40, seed=seed)


def check_interaction(seed: int) -> float:
    rng = np.random.default_rng(seed)
    blk = Interaction(4, 6, rng).astype(np.float64)
    prev = _rand(rng, (1, 4, 8, 8))
    enc = _rand(rng, (1, 6, 4, 4))
    return finite_diff_check(lambda p: blk(enc, p), prev, params=[enc, *blk.parameters()],
                             max_elems=30, seed=seed)


def check_net(seed: int) -> float:
    rng = np.random.default_rng(seed)
    net = MPCGNet(NetConfig(**SMALL_NET, seed=seed)).astype(np.float64)
    params = _freeze_gates(net, rng)
    x = Tensor(rng.random((1, 3, 32, 32)), dtype=np.float64)
    return finite_diff_check(lambda t: T.concat_channels(net(t, "train")), x, params=params,
                             max_elems=4, seed=seed)


CHECKS: dict[str, tuple[Callable[[int], float], float]] = {
    "is": (check_is, BLOCK_TOL),
    "cgmfe": (check_cgmfe, BLOCK_TOL),
    "wcad": (check_wcad, BLOCK_TOL),
    "dfa": (check_dfa, BLOCK_TOL),
    "chatt": (check_chatt, BLOCK_TOL),
    "spatt": (check_spatt, BLOCK_TOL),
    "interaction": (check_interaction, BLOCK_TOL),
    "net": (check_net, NET_TOL),
}


def run_check(name: str, seed: int) -> tuple[float, float]:
    """Return ``(worst relative error, tolerance)`` for one named check."""
    if name not in CHECKS:
        raise KeyError(f"unknown module {name!r}; choose from {sorted(CHECKS)}")
    fn, tol = CHECKS[name]
    with precision(np.float64):
        return fn(seed), tol
