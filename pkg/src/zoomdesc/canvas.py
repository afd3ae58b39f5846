"""Raster primitives: sketch images, zoom-stack extraction and augmentation.

Coordinates are continuous pixels with the origin at the top-left corner of
the image; pixel ``(row, col)`` covers ``[col, col+1) x [row, row+1)`` so its
center sits at ``(col + 0.5, row + 0.5)``.  Intensities live in ``[0, 1]``
with 0 = ink and 1 = paper.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numba import njit
from PIL import Image
from scipy import ndimage

BACKGROUND = 1.0
DEFAULT_ZOOMS = (0.10, 0.20, 0.40)
DEFAULT_CROP = 224
MIN_SIDE = 32


@dataclass(frozen=True)
class Point2D:
    x: float
    y: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=np.float64)


@dataclass
class SketchImage:
    """Square grayscale raster, 0 = ink, 1 = background."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 2 or px.shape[0] != px.shape[1]:
            raise ValueError(f"sketch images must be square 2-D grids, got shape {px.shape}")
        if px.shape[0] < MIN_SIDE:
            raise ValueError(f"image side {px.shape[0]} below minimum {MIN_SIDE}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("pixel intensities must lie in [0, 1]")
        self.pixels = px

    @property
    def side(self) -> int:
        return self.pixels.shape[0]

    @property
    def center(self) -> Point2D:
        return Point2D(self.side / 2.0, self.side / 2.0)

    def contains(self, p: Point2D) -> bool:
        return 0.0 <= p.x < self.side and 0.0 <= p.y < self.side

    @classmethod
    def blank(cls, side: int) -> "SketchImage":
        return cls(np.full((side, side), BACKGROUND, dtype=np.float32))


def load_png(path) -> SketchImage:
    img = Image.open(Path(path)).convert("L")
    return SketchImage(np.asarray(img, dtype=np.float32) / 255.0)


def save_png(image: SketchImage, path) -> None:
    px = np.clip(np.rint(image.pixels * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(px, mode="L").save(Path(path))


def quantize(pixels: np.ndarray) -> np.ndarray:
    """Snap intensities to the 8-bit grid so in-memory and PNG copies agree."""
    return (np.rint(np.clip(pixels, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


@dataclass
class ZoomStack:
    crops: np.ndarray  # (n_zooms, crop, crop)
    center: Point2D
    zoom_fractions: tuple
    source_side: int = 0

    def __post_init__(self):
        fr = tuple(float(f) for f in self.zoom_fractions)
        if len(fr) != len(self.crops):
            raise ValueError("one zoom fraction per crop required")
        if any(b <= a for a, b in zip(fr, fr[1:])):
            raise ValueError("zoom fractions must be strictly increasing")
        self.zoom_fractions = fr

    @property
    def crop_size(self) -> int:
        return self.crops.shape[-1]


@dataclass
class AugmentConfig:
    rotation_range: tuple = (0.0, 360.0)
    downsample_factors: tuple = (0.30, 0.60)
    downsample_prob: float = 0.2
    zoom_noise_sigma: float = 0.3
    zoom_noise_mu: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.downsample_prob <= 1.0:
            raise ValueError("downsample_prob must be a probability")
        if self.zoom_noise_sigma < 0:
            raise ValueError("zoom_noise_sigma must be non-negative")
        if any(not 0.0 <= f < 1.0 for f in self.downsample_factors):
            raise ValueError("downsample factors must lie in [0, 1)")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(rotation_range=(0.0, 0.0), downsample_prob=0.0, zoom_noise_sigma=0.0)


def _check_fractions(fractions: Sequence[float]) -> tuple:
    fr = tuple(float(f) for f in fractions)
    if not fr:
        raise ValueError("at least one zoom fraction is required")
    for f in fr:
        if not 0.0 < f <= 1.0:
            raise ValueError(f"zoom fraction {f} outside (0, 1]")
    return fr


def crop_source_sides(side: int, fractions: Sequence[float]) -> list[int]:
    """Integer source side of each zoom before resampling."""
    return [int(np.floor(f * side)) for f in _check_fractions(fractions)]


def rotation_matrix(degrees: float) -> np.ndarray:
    """2x2 rotation in image axes; +90 deg takes +x onto +y (y points down)."""
    t = np.deg2rad(degrees)
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, -s], [s, c]])


def _antialias_sigma(step: float) -> float:
    return max(0.0, (step - 1.0) / 2.0)


@njit(cache=True)
def _bilinear_kernel(px, xs, ys, cval, out):
    h, w = px.shape
    for i in range(xs.size):
        c = xs.flat[i] - 0.5
        r = ys.flat[i] - 0.5
        c0 = int(np.floor(c))
        r0 = int(np.floor(r))
        fc = c - c0
        fr = r - r0
        acc = 0.0
        for dr in range(2):
            rr = r0 + dr
            wr = fr if dr else 1.0 - fr
            for dc in range(2):
                cc = c0 + dc
                wc = fc if dc else 1.0 - fc
                if 0 <= rr < h and 0 <= cc < w:
                    v = px[rr, cc]
                else:
                    v = cval
                acc += wr * wc * v
        out.flat[i] = min(max(acc, 0.0), 1.0)


def sample_bilinear(pixels: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear lookup at continuous coordinates; outside the grid reads paper.

    Matches ``scipy.ndimage.map_coordinates(order=1, mode="grid-constant")``.
    """
    xs = np.ascontiguousarray(xs, dtype=np.float64)
    ys = np.ascontiguousarray(np.broadcast_to(ys, xs.shape), dtype=np.float64)
    out = np.empty(xs.shape, dtype=np.float32)
    _bilinear_kernel(np.ascontiguousarray(pixels, dtype=np.float32), xs, ys, BACKGROUND, out)
    return out


def warp_affine(image: SketchImage, inverse: np.ndarray, side: int | None = None,
                antialias: float = 1.0) -> SketchImage:
    """Resample ``image`` through an inverse 2x3 map (output coords -> input coords)."""
    side = image.side if side is None else int(side)
    px = image.pixels
    sigma = _antialias_sigma(antialias)
    if sigma > 0:
        px = ndimage.gaussian_filter(px, sigma, mode="constant", cval=BACKGROUND)
    g = np.arange(side) + 0.5
    xx, yy = np.meshgrid(g, g)
    sx = inverse[0, 0] * xx + inverse[0, 1] * yy + inverse[0, 2]
    sy = inverse[1, 0] * xx + inverse[1, 1] * yy + inverse[1, 2]
    return SketchImage(sample_bilinear(px, sx, sy).astype(np.float32))


def rotate_image(image: SketchImage, degrees: float, center: Point2D | None = None) -> SketchImage:
    """Rotate content by ``degrees`` about ``center`` (default image center)."""
    c = image.center if center is None else center
    cvec = c.as_array()
    rinv = rotation_matrix(-degrees)
    inv = np.hstack([rinv, (cvec - rinv @ cvec)[:, None]])
    return warp_affine(image, inv)


def resize_image(image: SketchImage, new_side: int) -> SketchImage:
    step = image.side / float(new_side)
    inv = np.array([[step, 0.0, 0.0], [0.0, step, 0.0]])
    return warp_affine(image, inv, side=new_side, antialias=step)


def zoom_sources(image: SketchImage, fractions: Sequence[float], crop_size: int) -> list[np.ndarray]:
    """Per-zoom copies of the image low-passed for their resampling ratio."""
    out = []
    for src in crop_source_sides(image.side, fractions):
        sigma = _antialias_sigma(src / crop_size)
        px = image.pixels
        if sigma > 0:
            px = ndimage.gaussian_filter(px, sigma, mode="constant", cval=BACKGROUND)
        out.append(px)
    return out


def extract_zoom_crops(image: SketchImage, points: np.ndarray, fractions: Sequence[float] = DEFAULT_ZOOMS,
                       crop_size: int = DEFAULT_CROP, rotations: np.ndarray | None = None,
                       scales: np.ndarray | None = None, sources: list | None = None) -> np.ndarray:
    """Batch zoom-stack extraction for many points of one image.

    points: (n, 2) array of x, y.  rotations: (n,) degrees applied to the
    image about each point before cropping.  scales: (n, n_zooms) relative
    crop-size factors.  sources: optional output of ``zoom_sources`` for
    reuse across calls.  Returns float32 (n, n_zooms, crop_size, crop_size).
    """
    fr = _check_fractions(fractions)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    out = np.empty((n, len(fr), crop_size, crop_size), dtype=np.float32)
    if n == 0:
        return out
    bad = (pts < 0).any(axis=1) | (pts >= image.side).any(axis=1)
    if bad.any():
        raise ValueError(f"point {tuple(pts[np.argmax(bad)])} outside image of side {image.side}")
    sides = crop_source_sides(image.side, fr)
    if any(s <= 0 for s in sides):
        raise ValueError("zoom fraction too small for this image")
    if rotations is None:
        rotations = np.zeros(n)
    if scales is None:
        scales = np.ones((n, len(fr)))
    rotations = np.asarray(rotations, dtype=np.float64).reshape(n)
    scales = np.asarray(scales, dtype=np.float64).reshape(n, len(fr))
    unit = (np.arange(crop_size) + 0.5) / crop_size - 0.5
    ux, uy = np.meshgrid(unit, unit)
    # reading the rotated image at p + o is reading the original at p + R(-theta) o
    t = np.deg2rad(-rotations)
    cos, sin = np.cos(t)[:, None, None], np.sin(t)[:, None, None]
    if sources is None:
        sources = zoom_sources(image, fr, crop_size)
    for z, src in enumerate(sides):
        px = sources[z]
        extent = (src * scales[:, z])[:, None, None]
        ox, oy = ux[None] * extent, uy[None] * extent
        sx = pts[:, 0, None, None] + cos * ox - sin * oy
        sy = pts[:, 1, None, None] + sin * ox + cos * oy
        out[:, z] = sample_bilinear(px, sx, sy)
    return out


def extract_zoom_stack(image: SketchImage, p: Point2D, fractions: Sequence[float] = DEFAULT_ZOOMS,
                       crop_size: int = DEFAULT_CROP) -> ZoomStack:
    if not image.contains(p):
        raise ValueError(f"point ({p.x}, {p.y}) outside image of side {image.side}")
    fr = _check_fractions(fractions)
    crops = extract_zoom_crops(image, np.array([[p.x, p.y]]), fr, crop_size)[0]
    return ZoomStack(crops, p, fr, image.side)


@dataclass
class AugmentDraw:
    """One sample of augmentation parameters for a single stack."""

    rotation: float
    downsample: float | None
    zoom_noise: np.ndarray = field(default_factory=lambda: np.zeros(0))


def sample_zoom_noise(cfg: AugmentConfig, rng: np.random.Generator, size) -> np.ndarray:
    g = rng.normal(cfg.zoom_noise_mu, cfg.zoom_noise_sigma, size=size)
    return np.maximum(g, -0.9)


def draw_augmentation(cfg: AugmentConfig, rng: np.random.Generator, n_zooms: int) -> AugmentDraw:
    lo, hi = cfg.rotation_range
    rot = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    down = None
    if cfg.downsample_factors and rng.random() < cfg.downsample_prob:
        down = float(cfg.downsample_factors[rng.integers(len(cfg.downsample_factors))])
    return AugmentDraw(rot, down, sample_zoom_noise(cfg, rng, n_zooms))


def downsampled(image: SketchImage, factor: float) -> SketchImage:
    """Shrink the image side by ``factor`` (0.3 -> 70% of the original side)."""
    new_side = max(MIN_SIDE, int(round(image.side * (1.0 - factor))))
    return resize_image(image, new_side)


def augment_stack(stack: ZoomStack, image: SketchImage, cfg: AugmentConfig,
                  rng: np.random.Generator) -> ZoomStack:
    """Re-extract ``stack`` from ``image`` under one random augmentation draw."""
    draw = draw_augmentation(cfg, rng, len(stack.zoom_fractions))
    src, p = image, stack.center
    if draw.downsample is not None:
        src = downsampled(image, draw.downsample)
        k = src.side / image.side
        p = Point2D(min(p.x * k, src.side - 1e-6), min(p.y * k, src.side - 1e-6))
    crops = extract_zoom_crops(src, np.array([[p.x, p.y]]), stack.zoom_fractions, stack.crop_size,
                               rotations=np.array([draw.rotation]),
                               scales=(1.0 + draw.zoom_noise)[None])[0]
    return ZoomStack(crops, stack.center, stack.zoom_fractions, src.side)


class Augmenter:
    """Batch augmentation over one corpus; caches downsampled image copies."""

    def __init__(self, cfg: AugmentConfig, fractions: Sequence[float] = DEFAULT_ZOOMS,
                 crop_size: int = DEFAULT_CROP):
        self.cfg = cfg
        self.fractions = _check_fractions(fractions)
        self.crop_size = crop_size
        self._cache: dict = {}

    def _source(self, key, image: SketchImage, factor):
        ck = (key, factor)
        if ck not in self._cache:
            src = image if factor is None else downsampled(image, factor)
            self._cache[ck] = (src, zoom_sources(src, self.fractions, self.crop_size))
        return self._cache[ck]

    def crops(self, key, image: SketchImage, points: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Augmented crops for many points of one image, one draw per point."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        nz = len(self.fractions)
        draws = [draw_augmentation(self.cfg, rng, nz) for _ in range(len(pts))]
        out = np.empty((len(pts), nz, self.crop_size, self.crop_size), dtype=np.float32)
        factors = sorted({d.downsample for d in draws}, key=lambda f: -1.0 if f is None else f)
        for f in factors:
            idx = [i for i, d in enumerate(draws) if d.downsample == f]
            src, blurred = self._source(key, image, f)
            k = src.side / image.side
            p = np.minimum(pts[idx] * k, src.side - 1e-6)
            out[idx] = extract_zoom_crops(
                src, p, self.fractions, self.crop_size,
                rotations=np.array([draws[i].rotation for i in idx]),
                scales=np.array([1.0 + draws[i].zoom_noise for i in idx]), sources=blurred)
        return out
