"""Seeded value noise used by the texture generator and the mask degrader."""

import numpy as np

from .numerics import Stream


def _fade(t):
    return t * t * t * (t * (t * 6 - 15) + 10)


def value_noise(h, w, cell, stream):
    """Single octave of smooth value noise in [0, 1].

    A lattice of uniform values with spacing ``cell`` pixels is drawn from
    ``stream`` (row-major) and interpolated with the quintic fade curve.
    """
    gh = int(np.ceil(h / cell)) + 2
    gw = int(np.ceil(w / cell)) + 2
    grid = stream.uniform((gh, gw))
    ys = np.arange(h) / cell
    xs = np.arange(w) / cell
    yi = np.floor(ys).astype(int)
    xi = np.floor(xs).astype(int)
    fy = _fade(ys - yi)[:, None]
    fx = _fade(xs - xi)[None, :]
    v00 = grid[yi[:, None], xi[None, :]]
    v01 = grid[yi[:, None], xi[None, :] + 1]
    v10 = grid[yi[:, None] + 1, xi[None, :]]
    v11 = grid[yi[:, None] + 1, xi[None, :] + 1]
    top = v00 + fx * (v01 - v00)
    bot = v10 + fx * (v11 - v10)
    return top + fy * (bot - top)


def fractal_noise(h, w, seed, base_cell=16.0, octaves=3, persistence=0.5, stream="fractal"):
    """Sum of octaves with halving cell size, rescaled to [0, 1]."""
    st = Stream(seed, stream)
    total = np.zeros((h, w))
    amp, norm, cell = 1.0, 0.0, float(base_cell)
    for _ in range(octaves):
        total += amp * value_noise(h, w, max(cell, 1.0), st)
        norm += amp
        amp *= persistence
        cell /= 2.0
    return total / norm
