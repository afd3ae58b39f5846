"""Descriptor indexes, exact nearest-neighbour matching and the perturbation harness."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .canvas import Point2D, SketchImage, extract_zoom_crops, rotation_matrix, warp_affine, zoom_sources
from .embedder import EmbedderModel, ShapeError, embed_crops


@dataclass
class DescriptorIndex:
    point_ids: list
    points: np.ndarray  # (n, 2)
    descriptors: np.ndarray  # (n, d)
    sketch_id: str | None = None

    def __post_init__(self):
        if len(set(self.point_ids)) != len(self.point_ids):
            raise ValueError("duplicate point ids in index")
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        self.descriptors = np.asarray(self.descriptors)
        if not (len(self.point_ids) == len(self.points) == len(self.descriptors)):
            raise ValueError("index columns have different lengths")

    def __len__(self):
        return len(self.point_ids)

    @property
    def d(self) -> int:
        return self.descriptors.shape[1] if self.descriptors.ndim == 2 else 0

    def subset(self, ids) -> "DescriptorIndex":
        where = {p: k for k, p in enumerate(self.point_ids)}
        rows = [where[i] for i in ids]
        return DescriptorIndex(list(ids), self.points[rows], self.descriptors[rows], self.sketch_id)

    def point(self, pid) -> Point2D:
        x, y = self.points[self.point_ids.index(pid)]
        return Point2D(float(x), float(y))


def _normalize_points(points):
    if isinstance(points, dict):
        return list(points.keys()), [points[k] for k in points]
    ids, pts = [], []
    for pid, p in points:
        ids.append(pid)
        pts.append(p)
    return ids, pts


def build_index(model: EmbedderModel, image: SketchImage, points, sketch_id=None) -> DescriptorIndex:
    """Embed every annotated point; ``points`` is a mapping or (id, Point2D) pairs."""
    ids, pts = _normalize_points(points)
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate point ids")
    arr = np.array([[p.x, p.y] for p in pts], dtype=np.float64).reshape(-1, 2)
    if len(arr) == 0:
        return DescriptorIndex([], arr, np.empty((0, model.d), dtype=np.float32), sketch_id)
    srcs = zoom_sources(image, model.zoom_fractions, model.crop_size)
    crops = extract_zoom_crops(image, arr, model.zoom_fractions, model.crop_size, sources=srcs)
    return DescriptorIndex(ids, arr, embed_crops(model, crops), sketch_id)


@dataclass
class MatchResult:
    source_point_id: object
    ranked_targets: list  # [(target_point_id, distance), ...] ascending

    @property
    def chosen(self):
        return self.ranked_targets[0]


def _tie_ranks(ids) -> np.ndarray:
    order = sorted(range(len(ids)), key=lambda k: ids[k])
    rank = np.empty(len(ids), dtype=np.int64)
    rank[order] = np.arange(len(ids))
    return rank


def distance_matrix(src: DescriptorIndex, tgt: DescriptorIndex) -> np.ndarray:
    if src.d != tgt.d and len(src) and len(tgt):
        raise ShapeError(f"descriptor dimensions differ: {src.d} vs {tgt.d}")
    return cdist(np.asarray(src.descriptors, np.float64), np.asarray(tgt.descriptors, np.float64))


def match_nn(src: DescriptorIndex, tgt: DescriptorIndex, ranked: bool = False) -> list[MatchResult]:
    """Exact nearest target per source point; ties go to the lowest target id."""
    if len(tgt) == 0:
        raise ValueError("target index is empty")
    dist = distance_matrix(src, tgt)
    tie = _tie_ranks(tgt.point_ids)
    out = []
    for i, pid in enumerate(src.point_ids):
        row = dist[i]
        if ranked:
            order = np.lexsort((tie, row))
            out.append(MatchResult(pid, [(tgt.point_ids[j], float(row[j])) for j in order]))
        else:
            m = row.min()
            cands = np.flatnonzero(row == m)
            j = cands[np.argmin(tie[cands])]
            out.append(MatchResult(pid, [(tgt.point_ids[j], float(row[j]))]))
    return out


@dataclass
class Assignment:
    pairs: list  # [(src_id, tgt_id, distance)]
    total_cost: float


def match_hungarian(src: DescriptorIndex, tgt: DescriptorIndex) -> Assignment:
    """One-to-one assignment of every source point minimising summed distance."""
    if len(src) > len(tgt):
        raise ValueError(f"cannot assign {len(src)} sources injectively into {len(tgt)} targets")
    if len(src) == 0:
        return Assignment([], 0.0)
    dist = distance_matrix(src, tgt)
    rows, cols = linear_sum_assignment(dist)
    pairs = [(src.point_ids[r], tgt.point_ids[c], float(dist[r, c])) for r, c in zip(rows, cols)]
    return Assignment(pairs, float(dist[rows, cols].sum()))


def write_matches_jsonl(results: list[MatchResult], path, with_rank: bool = False) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in results:
            tgt, dist = r.chosen
            obj = {"src": r.source_point_id, "tgt": tgt, "dist": dist}
            if with_rank:
                obj["rank"] = [t for t, _ in r.ranked_targets]
            fh.write(json.dumps(obj) + "\n")


@dataclass
class Perturbation:
    rotation: float
    scale: float
    center: tuple

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be positive")

    @property
    def matrix(self) -> np.ndarray:
        """Forward 2x3 map applied to point coordinates."""
        a = self.scale * rotation_matrix(self.rotation)
        c = np.asarray(self.center, float)
        return np.hstack([a, (c - a @ c)[:, None]])

    @property
    def inverse(self) -> np.ndarray:
        a = rotation_matrix(-self.rotation) / self.scale
        c = np.asarray(self.center, float)
        return np.hstack([a, (c - a @ c)[:, None]])

    def apply(self, pts: np.ndarray) -> np.ndarray:
        m = self.matrix
        return np.asarray(pts, float) @ m[:, :2].T + m[:, 2]

    def apply_inverse(self, pts: np.ndarray) -> np.ndarray:
        m = self.inverse
        return np.asarray(pts, float) @ m[:, :2].T + m[:, 2]


def transform_image(image: SketchImage, pert: Perturbation) -> SketchImage:
    return warp_affine(image, pert.inverse, antialias=1.0 / pert.scale)


def perturb_image(image: SketchImage, points, max_rot: float, max_zoom: float, rng: np.random.Generator):
    """Random similarity about the image center applied to image and points.

    Points pushed outside the frame are dropped from the returned mapping.
    """
    if not 0.0 <= max_zoom < 1.0:
        raise ValueError("max_zoom must lie in [0, 1)")
    rot = float(rng.uniform(-max_rot, max_rot)) if max_rot > 0 else 0.0
    scale = float(rng.uniform(1.0 - max_zoom, 1.0 + max_zoom)) if max_zoom > 0 else 1.0
    pert = Perturbation(rot, scale, (image.side / 2.0, image.side / 2.0))
    ids, pts = _normalize_points(points)
    if rot == 0.0 and scale == 1.0:
        return image, dict(zip(ids, pts)), pert
    arr = pert.apply(np.array([[p.x, p.y] for p in pts]).reshape(-1, 2))
    out = {}
    for pid, (x, y) in zip(ids, arr):
        if 0.0 <= x < image.side and 0.0 <= y < image.side:
            out[pid] = Point2D(float(x), float(y))
    return transform_image(image, pert), out, pert


def save_index(index: DescriptorIndex, path) -> None:
    np.savez(Path(path), point_ids=np.array([str(p) for p in index.point_ids]), points=index.points,
             descriptors=index.descriptors, sketch_id=str(index.sketch_id))
