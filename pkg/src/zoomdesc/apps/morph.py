"""Correspondence-driven image morphing with a confidence-aware tanh blend."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import Delaunay, QhullError

from ..canvas import Point2D, SketchImage, sample_bilinear
from ..dataset.bluenoise import blue_noise_sample
from ..embedder import EmbedderModel
from ..matching import build_index, match_nn


class MorphError(RuntimeError):
    pass


@dataclass
class MorphConfig:
    k: int = 10
    steps: int = 50
    # delta / rho range as fractions of the step count
    dmin: float = 0.2
    dmax: float = 0.8
    rmin: float = 0.05
    rmax: float = 0.25
    n_candidates: int = 200
    corner_confidence: float = 1.0
    blend: str = "tanh"  # "linear" gives a plain cross-dissolve for comparison

    def __post_init__(self):
        if self.blend not in ("tanh", "linear"):
            raise ValueError(f"unknown blend schedule {self.blend!r}")
        if self.k < 3:
            raise ValueError("k >= 3 correspondences required for a triangulation")
        if self.steps < 2:
            raise ValueError("steps must be >= 2")
        if self.rmin <= 0 or self.rmax <= 0:
            raise ValueError("rho must stay positive")

    def delta(self, conf):
        return self.steps * (self.dmin + np.asarray(conf) * (self.dmax - self.dmin))

    def rho(self, conf):
        return self.steps * (self.rmin + np.asarray(conf) * (self.rmax - self.rmin))


def alpha_blend_weight(s, delta, rho):
    """1/2 + 1/2 tanh((s - delta) / rho)."""
    rho = np.asarray(rho, dtype=np.float64)
    if np.any(rho <= 0):
        raise ValueError("rho must be positive")
    out = 0.5 + 0.5 * np.tanh((np.asarray(s, dtype=np.float64) - delta) / rho)
    return float(out) if np.ndim(out) == 0 else out


def normalized_blend(s, steps, delta, rho):
    """Blend weight rescaled so that step 0 gives 0 and step ``steps`` gives 1."""
    a0 = alpha_blend_weight(0.0, delta, rho)
    a1 = alpha_blend_weight(float(steps), delta, rho)
    return (alpha_blend_weight(float(s), delta, rho) - a0) / (a1 - a0)


@dataclass
class Correspondence:
    a: Point2D
    b: Point2D
    confidence: float
    distance: float = 0.0


def farthest_point_order(pts: np.ndarray, k: int, start: int = 0) -> list[int]:
    chosen = [start]
    d = np.linalg.norm(pts - pts[start], axis=1)
    while len(chosen) < min(k, len(pts)):
        j = int(np.argmax(d))
        chosen.append(j)
        d = np.minimum(d, np.linalg.norm(pts - pts[j], axis=1))
    return chosen


def select_morph_correspondences(image_a: SketchImage, image_b: SketchImage, model: EmbedderModel,
                                 cfg: MorphConfig, rng: np.random.Generator) -> list[Correspondence]:
    """Blue-noise candidates, NN matches, best quartile, farthest-point spread to k."""
    pa = blue_noise_sample(image_a, cfg.n_candidates, rng)
    pb = blue_noise_sample(image_b, cfg.n_candidates, rng)
    if len(pa) < cfg.k or len(pb) == 0:
        raise MorphError("not enough ink to pick correspondences")
    ia = build_index(model, image_a, [(i, p) for i, p in enumerate(pa)])
    ib = build_index(model, image_b, [(i, p) for i, p in enumerate(pb)])
    res = match_nn(ia, ib)
    dist = np.array([r.chosen[1] for r in res])
    dmax = dist.max() if dist.max() > 0 else 1.0
    conf = 1.0 - dist / dmax
    order = np.argsort(dist, kind="stable")
    keep = order[:max(cfg.k, len(order) // 4)]
    src = np.array([[pa[i].x, pa[i].y] for i in keep])
    picked = [keep[j] for j in farthest_point_order(src, cfg.k)]
    out = []
    for i in picked:
        tgt = pb[res[i].chosen[0]]
        out.append(Correspondence(pa[i], tgt, float(conf[i]), float(dist[i])))
    return out


def _corners(side: int) -> np.ndarray:
    return np.array([[0.0, 0.0], [side, 0.0], [0.0, side], [side, side]])


def triangulate(points: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
    """Delaunay simplices; one 0.5 px jitter retry on degenerate input."""
    try:
        tri = Delaunay(points)
    except QhullError:
        rng = rng or np.random.default_rng(0)
        try:
            tri = Delaunay(points + rng.uniform(-0.5, 0.5, size=points.shape))
        except QhullError as exc:
            raise MorphError("degenerate triangulation after jitter") from exc
    simp = tri.simplices
    if len(np.unique(simp)) < len(points):
        raise MorphError("triangulation dropped coincident vertices")
    return simp


def _barycentric(tris: np.ndarray, xy: np.ndarray) -> np.ndarray:
    """(T, N, 3) barycentric coordinates of N points in T triangles."""
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    v0, v1 = b - a, c - a
    det = v0[:, 0] * v1[:, 1] - v0[:, 1] * v1[:, 0]
    det = np.where(np.abs(det) < 1e-12, 1e-12, det)
    d = xy[None, :, :] - a[:, None, :]
    l1 = (d[..., 0] * v1[:, None, 1] - d[..., 1] * v1[:, None, 0]) / det[:, None]
    l2 = (v0[:, None, 0] * d[..., 1] - v0[:, None, 1] * d[..., 0]) / det[:, None]
    return np.stack([1.0 - l1 - l2, l1, l2], axis=-1)


@dataclass
class MorphResult:
    frames: list
    correspondences: list
    simplices: np.ndarray
    vertices_a: np.ndarray
    vertices_b: np.ndarray
    vertex_confidence: np.ndarray
    warped_a: list = field(default_factory=list)
    warped_b: list = field(default_factory=list)

    def vertices_at(self, s: float, steps: int) -> np.ndarray:
        t = s / steps
        return (1.0 - t) * self.vertices_a + t * self.vertices_b

    def sidecar(self) -> dict:
        return {
            "correspondences": [{"a": [c.a.x, c.a.y], "b": [c.b.x, c.b.y], "confidence": c.confidence,
                                 "distance": c.distance} for c in self.correspondences],
            "triangles": self.simplices.tolist(),
            "vertex_confidence": self.vertex_confidence.tolist(),
        }


def morph_frames(image_a: SketchImage, image_b: SketchImage, correspondences: list[Correspondence],
                 cfg: MorphConfig, rng: np.random.Generator | None = None, keep_warps: bool = False) -> MorphResult:
    """Render S+1 frames from explicit correspondences."""
    if image_a.side != image_b.side:
        raise ValueError("morph needs images of the same side")
    side = image_a.side
    va = np.vstack([[[c.a.x, c.a.y] for c in correspondences], _corners(side)])
    vb = np.vstack([[[c.b.x, c.b.y] for c in correspondences], _corners(side)])
    vconf = np.concatenate([[c.confidence for c in correspondences], np.full(4, cfg.corner_confidence)])
    simp = triangulate(va, rng)
    g = np.arange(side) + 0.5
    xx, yy = np.meshgrid(g, g)
    xy = np.stack([xx.ravel(), yy.ravel()], axis=1)
    res = MorphResult([], list(correspondences), simp, va, vb, vconf)
    S = cfg.steps
    for s in range(S + 1):
        vs = res.vertices_at(s, S)
        bary = _barycentric(vs[simp], xy)
        # enclosing triangle, or the least-outside one where the mesh folds
        t_idx = np.argmax(bary.min(axis=2), axis=0)
        lam = bary[t_idx, np.arange(len(xy))]
        tri = simp[t_idx]
        src_a = np.einsum("nk,nkj->nj", lam, va[tri])
        src_b = np.einsum("nk,nkj->nj", lam, vb[tri])
        wa = _sample(image_a, src_a)
        wb = _sample(image_b, src_b)
        conf = vconf[tri].mean(axis=1)
        if cfg.blend == "linear":
            alpha = np.full(len(xy), s / S)
        else:
            alpha = normalized_blend(s, S, cfg.delta(conf), cfg.rho(conf))
        frame = (1.0 - alpha) * wa + alpha * wb
        res.frames.append(SketchImage(np.clip(frame, 0.0, 1.0).reshape(side, side).astype(np.float32)))
        if keep_warps:
            res.warped_a.append(SketchImage(wa.reshape(side, side)))
            res.warped_b.append(SketchImage(wb.reshape(side, side)))
    return res


def _sample(image: SketchImage, xy: np.ndarray) -> np.ndarray:
    return sample_bilinear(image.pixels, np.ascontiguousarray(xy[:, 0]), np.ascontiguousarray(xy[:, 1]))


def morph(image_a: SketchImage, image_b: SketchImage, model: EmbedderModel, cfg: MorphConfig | None = None,
          rng: np.random.Generator | int = 0, keep_warps: bool = False) -> MorphResult:
    cfg = cfg or MorphConfig()
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    if image_a.side != image_b.side:
        raise ValueError("morph needs images of the same side")
    corr = select_morph_correspondences(image_a, image_b, model, cfg, rng)
    return morph_frames(image_a, image_b, corr, cfg, rng, keep_warps=keep_warps)
