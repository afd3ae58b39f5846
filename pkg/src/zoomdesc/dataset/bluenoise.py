"""Poisson-disk (blue noise) point sampling restricted to the neighbourhood of ink."""
from __future__ import annotations

import numpy as np
from numba import njit
from scipy import ndimage

from ..canvas import Point2D, SketchImage

INK_THRESHOLD = 0.5
R_INK_FRACTION = 0.02
MIN_RADIUS = 0.5


def ink_mask(image: SketchImage, threshold: float = INK_THRESHOLD) -> np.ndarray:
    return image.pixels < threshold


def eligible_pixels(image: SketchImage, r_ink: float) -> np.ndarray:
    """(row, col) of pixels whose center lies within ``r_ink`` of an ink pixel."""
    ink = ink_mask(image)
    if not ink.any():
        return np.empty((0, 2), dtype=int)
    dist = ndimage.distance_transform_edt(~ink)
    return np.argwhere(dist <= r_ink)


@njit(cache=True)
def _dart_throw_grid(cands, radius, limit):
    cell = radius / np.sqrt(2.0)
    nx = int(cands[:, 0].max() / cell) + 5
    ny = int(cands[:, 1].max() / cell) + 5
    grid = -np.ones((nx, ny), dtype=np.int64)
    r2 = radius * radius
    keep = np.empty(min(limit, len(cands)), dtype=np.int64)
    k = 0
    for i in range(len(cands)):
        x, y = cands[i, 0], cands[i, 1]
        gx, gy = int(x / cell) + 2, int(y / cell) + 2
        ok = True
        for dx in range(-2, 3):
            for dy in range(-2, 3):
                j = grid[gx + dx, gy + dy]
                if j >= 0:
                    if (cands[j, 0] - x) ** 2 + (cands[j, 1] - y) ** 2 < r2:
                        ok = False
                        break
            if not ok:
                break
        if ok:
            grid[gx, gy] = i
            keep[k] = i
            k += 1
            if k >= limit:
                break
    return keep[:k]


def _dart_throw(cands: np.ndarray, radius: float, limit: int) -> list[int]:
    """Greedy acceptance in candidate order with a uniform hash grid."""
    return _dart_throw_grid(cands, float(radius), int(limit)).tolist()


def blue_noise_sample(image: SketchImage, n: int, rng: np.random.Generator,
                      r_ink_fraction: float = R_INK_FRACTION, iterations: int = 14,
                      return_radius: bool = False):
    """Up to ``n`` points near strokes, pairwise at least ``r_min`` apart.

    ``r_min`` is the largest radius found by bisection at which the dart
    thrower still reaches ``n`` points on a fixed candidate sequence.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    pix = eligible_pixels(image, r_ink_fraction * image.side)
    if len(pix) == 0:
        return ([], 0.0) if return_radius else []
    order = rng.permutation(len(pix))
    jitter = rng.uniform(0.0, 1.0, size=(len(pix), 2))
    # candidates as (x, y); jitter stays inside the eligible pixel
    cands = np.stack([pix[order, 1], pix[order, 0]], axis=1) + jitter
    lo, hi = MIN_RADIUS, float(image.side)
    best = _dart_throw(cands, lo, n)
    if len(best) >= n:
        for _ in range(iterations):
            mid = 0.5 * (lo + hi)
            keep = _dart_throw(cands, mid, n)
            if len(keep) >= n:
                lo, best = mid, keep
            else:
                hi = mid
    pts = [Point2D(float(cands[i, 0]), float(cands[i, 1])) for i in best[:n]]
    return (pts, lo) if return_radius else pts


def min_pairwise_distance(points) -> float:
    if len(points) < 2:
        return float("inf")
    a = np.array([[p.x, p.y] for p in points])
    from scipy.spatial.distance import pdist

    return float(pdist(a).min())
