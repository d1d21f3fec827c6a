"""Seeded prediction / ground-truth pairs shared by metric tests."""

import numpy as np


def random_case(seed, size=8):
    rng = np.random.default_rng(seed)
    kind = seed % 4
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == 0:
        gt = rng.random((size, size)) < rng.uniform(0.2, 0.6)
    else:
        cy, cx = rng.uniform(1, size - 2, size=2)
        ry, rx = rng.uniform(1.0, size / 2.5, size=2)
        gt = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        if not gt.any():
            gt[int(cy), int(cx)] = True
    noise = rng.random((size, size))
    if kind == 3:
        pred = noise
    else:
        mix = rng.uniform(0.2, 0.8)
        pred = np.clip(mix * gt + (1 - mix) * noise, 0, 1)
    return pred, gt
