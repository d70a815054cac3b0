# -*- coding: utf-8 -*-
"""Seeded procedural HR images.

Image ``i`` of a set with base seed ``s`` comes from family ``i mod len(FAMILIES)``
and is drawn from ``numpy.random.default_rng(s + i)``, so any image can be
regenerated on its own.
"""

import numpy as np

__all__ = ['FAMILIES', 'synthesize', 'synthesize_set']


def _grid(size):
    y, x = np.mgrid[0:size, 0:size] / float(size)
    return y, x


def _colors(rng, n):
    return rng.uniform(0.05, 0.95, size=(n, 3))


def gradient(rng, size):
    """Linear colour ramp in a random direction."""
    y, x = _grid(size)
    angle = rng.uniform(0, 2 * np.pi)
    t = np.cos(angle) * x + np.sin(angle) * y
    t = (t - t.min()) / max(t.max() - t.min(), 1e-12)
    c0, c1 = _colors(rng, 2)
    return c0 + t[..., None] * (c1 - c0)


def stripes(rng, size):
    """Square-wave stripes of random period and orientation."""
    y, x = _grid(size)
    angle = rng.uniform(0, np.pi)
    period = rng.uniform(0.05, 0.25)
    t = (np.cos(angle) * x + np.sin(angle) * y) / period
    mask = (np.floor(t) % 2)[..., None]
    c0, c1 = _colors(rng, 2)
    return c0 + mask * (c1 - c0)


def checkerboard(rng, size):
    cells = int(rng.integers(2, 9))
    y, x = _grid(size)
    mask = ((np.floor(x * cells) + np.floor(y * cells)) % 2)[..., None]
    c0, c1 = _colors(rng, 2)
    return c0 + mask * (c1 - c0)


def discs(rng, size):
    """A few filled discs on a flat background."""
    y, x = _grid(size)
    img = np.broadcast_to(_colors(rng, 1)[0], (size, size, 3)).copy()
    for colour in _colors(rng, int(rng.integers(2, 6))):
        cy, cx = rng.uniform(0.1, 0.9, size=2)
        radius = rng.uniform(0.05, 0.3)
        img[(y - cy) ** 2 + (x - cx) ** 2 < radius ** 2] = colour
    return img


def waves(rng, size):
    """Sum of a few random plane sinusoids per channel."""
    y, x = _grid(size)
    img = np.zeros((size, size, 3))
    for _ in range(3):
        fy, fx = rng.uniform(1, 12, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        img += np.sin(2 * np.pi * (fy * y + fx * x) + phase)[..., None] * rng.uniform(-1, 1, size=3)
    return 0.5 + 0.15 * img


def strokes(rng, size):
    """Text-like glyphs: short thick pen strokes laid out on a few lines of ink over paper."""
    y, x = _grid(size)
    paper, ink = _colors(rng, 2)
    img = np.broadcast_to(paper, (size, size, 3)).copy()
    width = rng.uniform(0.015, 0.035)
    lines = int(rng.integers(2, 5))
    glyph = 1. / (lines + 1)
    for row in range(lines):
        base = (row + 1) * glyph
        cx = rng.uniform(0.02, 0.1)
        while cx < 0.9:
            # every glyph is two to four segments inside a glyph-sized box
            pts = np.column_stack([base + rng.uniform(-0.4, 0.4, size=5) * glyph,
                                   cx + rng.uniform(0., 0.6, size=5) * glyph])
            for (y0, x0), (y1, x1) in zip(pts[:-1], pts[1:int(rng.integers(3, 6))]):
                dy, dx = y1 - y0, x1 - x0
                t = np.clip(((y - y0) * dy + (x - x0) * dx) / max(dy * dy + dx * dx, 1e-12), 0., 1.)
                img[(y - y0 - t * dy) ** 2 + (x - x0 - t * dx) ** 2 < width ** 2] = ink
            cx += glyph * rng.uniform(0.7, 1.0)
    return img


#: Families in the order images cycle through them
FAMILIES = (gradient, stripes, checkerboard, discs, waves, strokes)


def synthesize(index, seed, size):
    """HR image ``index`` of the set seeded with ``seed``, as an ``(size, size, 3)`` array in ``[0, 1]``."""
    rng = np.random.default_rng(seed + index)
    return np.clip(FAMILIES[index % len(FAMILIES)](rng, size), 0., 1.)


def synthesize_set(count, seed, size):
    """``(count, size, size, 3)`` array of images ``0 .. count-1``."""
    if count == 0:
        return np.zeros((0, size, size, 3))
    return np.stack([synthesize(i, seed, size) for i in range(count)])
