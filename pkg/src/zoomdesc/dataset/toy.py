"""Procedural line-drawing corpus with exact keypoint correspondences.

Every category is a small parametric 2-D template made of labelled strokes.
A shape instance jitters the template parameters; a sketch renders one
instance under one view transform with a little stroke wobble and dropout.
Keypoints are defined by (stroke, arc-length fraction) on the template, so
the same keypoint id lands on the same semantic spot of every instance.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from ..canvas import Point2D, SketchImage, quantize
from .corpus import VIEWS, CorrespondenceSet, Corpus, SketchRecord

KEYPOINT_POOL = 240


class ToyConfigError(ValueError):
    pass


def _line(p0, p1, n=48):
    t = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - t) * np.asarray(p0, float) + t * np.asarray(p1, float)


def _arc(cx, cy, rx, ry, a0, a1, n=96):
    a = np.deg2rad(np.linspace(a0, a1, n))
    return np.stack([cx + rx * np.cos(a), cy + ry * np.sin(a)], axis=1)


def _poly(*pts, n=32):
    segs = [_line(a, b, n)[:-1] for a, b in zip(pts, pts[1:])]
    return np.vstack(segs + [np.asarray(pts[-1], float)[None]])


def _mug(p):
    w, h, ry = p["w"], p["h"], p["rim"]
    hs, ho = p["handle"], p["handle_y"]
    return [
        ("body", _line((-w, -h), (-w, h))),
        ("body", _line((w, -h), (w, h))),
        ("body", _arc(0, h, w, ry, 0, 180)),
        ("body", _arc(0, -h, w, ry, 0, 360, 128)),
        ("handle", _arc(w, ho, hs, hs * 1.35, -85, 85)),
    ]


def _lamp(p):
    top, bot, sx = p["shade_top"], p["shade_bottom"], p["stem_x"]
    return [
        ("base", _arc(0, 0.85, p["base"], 0.1, 0, 360, 128)),
        ("stem", _poly((0.0, 0.85), (sx, 0.35), (0.0, -0.1))),
        ("shade", _line((-top, -0.8), (top, -0.8))),
        ("shade", _line((-bot, -0.1), (bot, -0.1))),
        ("shade", _line((-top, -0.8), (-bot, -0.1))),
        ("shade", _line((top, -0.8), (bot, -0.1))),
    ]


def _chair(p):
    sw, bh, lg, d = p["seat"], p["back"], p["legs"], p["depth"]
    fl, fr, br, bl = (-sw, 0.1), (sw, 0.1), (sw + d, 0.1 + d), (-sw + d, 0.1 + d)
    return [
        ("seat", _poly(fl, fr, br, bl, fl)),
        ("back", _poly(fl, (-sw, 0.1 - bh), (sw, 0.1 - bh), fr)),
        ("back", _line((-sw, 0.1 - 0.55 * bh), (sw, 0.1 - 0.55 * bh))),
        ("legs", _line(fl, (fl[0], fl[1] + lg))),
        ("legs", _line(fr, (fr[0], fr[1] + lg))),
        ("legs", _line(br, (br[0], br[1] + lg - d))),
        ("legs", _line(bl, (bl[0], bl[1] + lg - d))),
    ]


def _bottle(p):
    nw, bw, sh = p["neck"], p["body"], p["shoulder"]
    return [
        ("cap", _poly((-nw - 0.03, -0.85), (-nw - 0.03, -1.0), (nw + 0.03, -1.0), (nw + 0.03, -0.85),
                      (-nw - 0.03, -0.85))),
        ("neck", _line((nw, -0.85), (nw, sh - 0.2))),
        ("neck", _line((-nw, -0.85), (-nw, sh - 0.2))),
        ("body", _poly((nw, sh - 0.2), (bw, sh), (bw, 0.9), (-bw, 0.9), (-bw, sh), (-nw, sh - 0.2))),
        ("body", _line((-bw, 0.35 + p["label"]), (bw, 0.35 + p["label"]))),
    ]


def _table(p):
    w, d, lg = p["w"], p["depth"], p["legs"]
    a, b, c, e = (-w, -0.2), (w - d, -0.2), (w, -0.2 + d), (-w + d, -0.2 + d)
    return [
        ("top", _poly(a, b, c, e, a)),
        ("legs", _line(a, (a[0], a[1] + lg))),
        ("legs", _line(b, (b[0], b[1] + lg - 0.1))),
        ("legs", _line(c, (c[0], c[1] + lg))),
        ("legs", _line(e, (e[0], e[1] + lg + 0.1))),
        ("top", _line((a[0], a[1] + p["shelf"]), (c[0], c[1] + p["shelf"]))),
    ]


def _kettle(p):
    rx, ry = p["rx"], p["ry"]
    return [
        ("body", _arc(0, 0.2, rx, ry, 0, 360, 160)),
        ("lid", _arc(0, 0.2 - ry, 0.22, 0.07, 180, 360, 48)),
        ("lid", _arc(0, 0.2 - ry - 0.12, 0.06, 0.05, 0, 360, 32)),
        ("spout", _poly((-rx * 0.9, 0.35), (-rx - p["spout"], -0.2), (-rx - p["spout"] - 0.05, -0.28))),
        ("spout", _line((-rx * 0.95, 0.05), (-rx - p["spout"] + 0.06, -0.3))),
        ("handle", _arc(rx * 0.9, 0.1, p["handle"], p["handle"] * 1.2, -80, 80, 64)),
    ]


@dataclass(frozen=True)
class Template:
    name: str
    build: object
    base: dict
    jitter: dict

    def params(self, rng: np.random.Generator, scale: float) -> dict:
        return {k: v + scale * self.jitter.get(k, 0.0) * float(rng.standard_normal()) for k, v in self.base.items()}


TEMPLATES = {
    "mug": Template("mug", _mug, {"w": 0.5, "h": 0.65, "rim": 0.12, "handle": 0.3, "handle_y": 0.0},
                    {"w": 0.08, "h": 0.08, "rim": 0.03, "handle": 0.06, "handle_y": 0.1}),
    "lamp": Template("lamp", _lamp, {"base": 0.45, "shade_top": 0.25, "shade_bottom": 0.6, "stem_x": 0.15},
                     {"base": 0.08, "shade_top": 0.06, "shade_bottom": 0.08, "stem_x": 0.12}),
    "chair": Template("chair", _chair, {"seat": 0.5, "back": 0.9, "legs": 0.75, "depth": 0.2},
                      {"seat": 0.07, "back": 0.12, "legs": 0.08, "depth": 0.05}),
    "bottle": Template("bottle", _bottle, {"neck": 0.12, "body": 0.42, "shoulder": -0.3, "label": 0.0},
                       {"neck": 0.03, "body": 0.07, "shoulder": 0.08, "label": 0.15}),
    "table": Template("table", _table, {"w": 0.85, "depth": 0.25, "legs": 0.8, "shelf": 0.5},
                      {"w": 0.08, "depth": 0.06, "legs": 0.1, "shelf": 0.1}),
    "kettle": Template("kettle", _kettle, {"rx": 0.5, "ry": 0.45, "spout": 0.35, "handle": 0.3},
                       {"rx": 0.06, "ry": 0.06, "spout": 0.08, "handle": 0.05}),
}

# projective maps applied in template coordinates, one per view label
VIEW_TRANSFORMS = {
    "front": np.eye(3),
    "right": np.array([[0.72, 0.0, 0.0], [0.10, 0.95, 0.0], [0.16, 0.0, 1.0]]),
    "front_right": np.array([[0.88, -0.18, 0.0], [0.16, 0.90, 0.0], [0.08, 0.08, 1.0]]),
}


@dataclass
class ToyConfig:
    n_categories: int = 4
    shapes_per_category: int = 10
    points_per_shape: int = 70
    views: tuple = VIEWS
    side: int = 256
    categories: tuple = ()
    shape_jitter: float = 1.0
    placement_jitter: float = 1.0
    wobble: float = 1.0  # pixels
    dropout: float = 0.15  # probability per stroke of a gap
    stroke_width: float = 2.0
    supersample: int = 4

    def __post_init__(self):
        self.views = tuple(self.views)
        self.categories = tuple(self.categories)
        if self.n_categories < 1 or self.shapes_per_category < 1:
            raise ToyConfigError("need at least one category and one shape")
        if self.points_per_shape < 1:
            raise ToyConfigError("points_per_shape must be positive")
        if self.points_per_shape > KEYPOINT_POOL:
            raise ToyConfigError(f"points_per_shape {self.points_per_shape} exceeds the "
                                 f"{KEYPOINT_POOL} available keypoint samples")
        unknown = [v for v in self.views if v not in VIEW_TRANSFORMS]
        if unknown:
            raise ToyConfigError(f"unknown views {unknown}; known: {sorted(VIEW_TRANSFORMS)}")
        names = self.categories or tuple(TEMPLATES)[: self.n_categories]
        if len(names) < self.n_categories or any(n not in TEMPLATES for n in names):
            raise ToyConfigError(f"need {self.n_categories} categories from {sorted(TEMPLATES)}")
        self.categories = tuple(names[: self.n_categories])

    @classmethod
    def from_toml(cls, path) -> "ToyConfig":
        import tomli

        with open(path, "rb") as fh:
            raw = tomli.load(fh)
        raw = raw.get("toy", raw)
        known = {f.name for f in fields(cls)}
        extra = set(raw) - known
        if extra:
            raise ToyConfigError(f"unknown toy config keys: {sorted(extra)}")
        return cls(**raw)


def _arclength(poly):
    seg = np.linalg.norm(np.diff(poly, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def point_at(poly, t):
    """Point at arc-length fraction ``t`` along a polyline."""
    s = _arclength(poly)
    target = t * s[-1]
    return np.array([np.interp(target, s, poly[:, 0]), np.interp(target, s, poly[:, 1])])


def keypoint_pool(template: Template, size: int = KEYPOINT_POOL) -> list[tuple[int, float, str]]:
    """(stroke index, arc fraction, part) triples spread over the base template."""
    strokes = template.build(template.base)
    lengths = np.array([_arclength(p)[-1] for _, p in strokes])
    counts = np.maximum(1, np.floor(size * lengths / lengths.sum()).astype(int))
    while counts.sum() < size:
        counts[np.argmax(lengths / counts)] += 1
    while counts.sum() > size:
        counts[np.argmax(counts)] -= 1
    pool = []
    for si, ((part, _), c) in enumerate(zip(strokes, counts)):
        pool += [(si, (j + 0.5) / c, part) for j in range(c)]
    return pool


def apply_homography(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, float).reshape(-1, 2)
    hom = np.hstack([pts, np.ones((len(pts), 1))]) @ h.T
    return hom[:, :2] / hom[:, 2:3]


def placement(side: int, rng: np.random.Generator, jitter: float) -> np.ndarray:
    """Similarity from template coordinates into pixel coordinates."""
    g = rng.standard_normal(4) * jitter
    scale = 0.33 * side * (1.0 + 0.04 * g[0])
    ang = np.deg2rad(6.0 * g[1])
    c, s = np.cos(ang) * scale, np.sin(ang) * scale
    tx = side / 2.0 + 0.02 * side * g[2]
    ty = side / 2.0 + 0.02 * side * g[3]
    return np.array([[c, -s, tx], [s, c, ty], [0.0, 0.0, 1.0]])


def _wobble(poly, amp, rng):
    if amp <= 0 or len(poly) < 3:
        return poly
    t = _arclength(poly)
    t = t / max(t[-1], 1e-9)
    a = rng.standard_normal(3)
    ph = rng.uniform(0, 2 * np.pi, 3)
    off = sum(a[k] / (k + 1) * np.sin(2 * np.pi * (k + 1) * t + ph[k]) for k in range(3)) * amp
    tan = np.gradient(poly, axis=0)
    nrm = np.stack([-tan[:, 1], tan[:, 0]], axis=1)
    nrm /= np.maximum(np.linalg.norm(nrm, axis=1, keepdims=True), 1e-9)
    return poly + off[:, None] * nrm


def _dropout(poly, prob, rng):
    if prob <= 0 or rng.random() >= prob:
        return [poly]
    n = len(poly)
    gap = max(2, int(n * rng.uniform(0.08, 0.2)))
    start = int(rng.integers(0, max(1, n - gap)))
    parts = [poly[:start], poly[start + gap:]]
    return [p for p in parts if len(p) >= 2]


def render_strokes(polys, side: int, width: float, supersample: int = 4) -> np.ndarray:
    ss = supersample
    canvas = Image.new("L", (side * ss, side * ss), 255)
    draw = ImageDraw.Draw(canvas)
    w = max(1, int(round(width * ss)))
    for poly in polys:
        pts = [(float(x * ss - 0.5), float(y * ss - 0.5)) for x, y in poly]
        draw.line(pts, fill=0, width=w, joint="curve")
    arr = np.asarray(canvas, dtype=np.float32).reshape(side, ss, side, ss).mean(axis=(1, 3)) / 255.0
    return quantize(arr)


@dataclass
class ToyShape:
    """One rendered sketch with its full geometric provenance."""

    image: SketchImage
    points: dict
    labels: dict
    transform: np.ndarray
    template_points: dict = field(default_factory=dict)


def render_shape(template: Template, params: dict, keypoints: dict, view: str, cfg: ToyConfig,
                 rng: np.random.Generator) -> ToyShape:
    strokes = template.build(params)
    transform = placement(cfg.side, rng, cfg.placement_jitter) @ VIEW_TRANSFORMS[view]
    polys = []
    for _, poly in strokes:
        px = _wobble(apply_homography(transform, poly), cfg.wobble, rng)
        polys += _dropout(px, cfg.dropout, rng)
    image = SketchImage(render_strokes(polys, cfg.side, cfg.stroke_width, cfg.supersample))
    pts, labels, tpl = {}, {}, {}
    margin = 1.0
    for pid, (si, t, part) in keypoints.items():
        q = point_at(strokes[si][1], t)
        x, y = apply_homography(transform, q)[0]
        if margin <= x < cfg.side - margin and margin <= y < cfg.side - margin:
            pts[pid] = Point2D(float(x), float(y))
            labels[pid] = part
            tpl[pid] = [float(q[0]), float(q[1])]
    return ToyShape(image, pts, labels, transform, tpl)


def generate_toy_corpus(cfg: ToyConfig, rng: np.random.Generator | int = 0) -> Corpus:
    rng = np.random.default_rng(rng)
    records, images, corrs = [], {}, []
    for cat in cfg.categories:
        tpl = TEMPLATES[cat]
        pool = keypoint_pool(tpl)
        chosen = rng.choice(len(pool), size=cfg.points_per_shape, replace=False)
        keypoints = {f"k{int(i):03d}": pool[int(i)] for i in sorted(chosen)}
        cat_ids = []
        for s in range(cfg.shapes_per_category):
            shape_rng = np.random.default_rng(rng.integers(2**63))
            params = tpl.params(shape_rng, cfg.shape_jitter)
            shape_id = f"{cat}_{s:03d}"
            for view in cfg.views:
                view_rng = np.random.default_rng(rng.integers(2**63))
                shape = render_shape(tpl, params, keypoints, view, cfg, view_rng)
                sid = f"{shape_id}_{view}"
                meta = {"transform": shape.transform.tolist(), "template_points": shape.template_points}
                records.append(SketchRecord(sid, cat, view, f"images/{sid}.png", shape.points, shape.labels,
                                            shape_id, meta))
                images[sid] = shape.image
                cat_ids.append(sid)
        by_id = {r.sketch_id: r for r in records}
        for a, b in itertools.combinations(cat_ids, 2):
            shared = [(pid, pid) for pid in by_id[a].points if pid in by_id[b].points]
            corrs.append(CorrespondenceSet(a, b, shared))
    return Corpus(records, corrs, images=images)


def shape_split(corpus: Corpus, holdout_per_category: int) -> tuple[Corpus, Corpus]:
    """Split by shape instance: the last ``holdout`` shapes of every category are held out."""
    train, test = [], []
    for cat, sids in corpus.by_category().items():
        shapes = sorted({corpus.records[s].model_id for s in sids})
        held = set(shapes[len(shapes) - holdout_per_category:]) if holdout_per_category else set()
        for s in sids:
            (test if corpus.records[s].model_id in held else train).append(s)
    return corpus.subset(train), corpus.subset(test)


def write_toy_corpus(cfg: ToyConfig, out_dir, seed: int = 0) -> Path:
    from .corpus import save_corpus

    return save_corpus(generate_toy_corpus(cfg, seed), out_dir)
