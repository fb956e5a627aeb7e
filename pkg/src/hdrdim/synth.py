"""Procedural HDR test scenes (uncalibrated, relative radiance)."""
from __future__ import annotations

import numpy as np

from .hdrio import HdrImage


def random_scene(height: int, width: int, rng: np.random.Generator) -> HdrImage:
    """A dim textured background, a sky-like gradient and a few bright emitters.

    The dynamic range is typically 10^3 to 10^4.
    """
    yy, xx = np.mgrid[0:height, 0:width] / max(height, width)
    base = rng.uniform(0.002, 0.02) * (1 + 0.5 * rng.random(3))
    img = np.broadcast_to(base, (height, width, 3)).copy()

    # low-frequency texture
    freq = rng.uniform(2, 8, size=2)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    tex = 1 + 0.8 * np.sin(2 * np.pi * freq[0] * xx + phase[0]) * np.sin(2 * np.pi * freq[1] * yy + phase[1])
    img *= tex[:, :, None]

    # sky gradient over a random fraction of the top
    horizon = rng.uniform(0.0, 0.5)
    sky = np.clip((horizon - yy) / max(horizon, 1e-6), 0, 1) * rng.uniform(0.05, 0.3)
    img += sky[:, :, None] * np.array([0.7, 0.85, 1.0])

    # emitters: discs and rectangles
    for _ in range(rng.integers(2, 7)):
        cy, cx = rng.uniform(0, yy.max()), rng.uniform(0, xx.max())
        level = 10 ** rng.uniform(-1.0, 0.5)
        colour = 0.6 + 0.4 * rng.random(3)
        if rng.random() < 0.5:
            r = rng.uniform(0.01, 0.08)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        else:
            hy, hx = rng.uniform(0.01, 0.1, size=2)
            mask = (np.abs(yy - cy) < hy) & (np.abs(xx - cx) < hx)
        img += mask[:, :, None] * (level * colour)
    return HdrImage(img)


def scene_set(n: int, height: int, width: int, seed: int = 0) -> list[HdrImage]:
    rng = np.random.default_rng(seed)
    return [random_scene(height, width, rng) for _ in range(n)]
