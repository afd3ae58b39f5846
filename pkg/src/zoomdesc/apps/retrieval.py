"""Sketch-to-model retrieval over banks of per-view point descriptors."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from ..canvas import SketchImage
from ..dataset.bluenoise import blue_noise_sample
from ..dataset.corpus import Corpus
from ..embedder import EmbedderModel
from ..matching import build_index

POINTS_PER_MODEL = 70
QUERY_POINTS = 1000


@dataclass
class RetrievalIndex:
    banks: dict  # (model_id, view) -> (n, d)
    points_per_model: int = POINTS_PER_MODEL
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.banks:
            raise ValueError("retrieval index has no banks")
        dims = {b.shape[1] for b in self.banks.values()}
        if len(dims) != 1:
            raise ValueError(f"banks have mixed descriptor dimensions {sorted(dims)}")
        if any(len(b) == 0 for b in self.banks.values()):
            raise ValueError("empty descriptor bank")

    @property
    def model_ids(self) -> list:
        return sorted({m for m, _ in self.banks})

    def views_of(self, model_id) -> list:
        return sorted(v for m, v in self.banks if m == model_id)

    def __len__(self):
        return sum(len(b) for b in self.banks.values())


def build_retrieval_index(corpus: Corpus, model: EmbedderModel, points_per_model: int = POINTS_PER_MODEL,
                          rng: np.random.Generator | int = 0) -> RetrievalIndex:
    """Embed ``points_per_model`` blue-noise stroke samples for every (model, view) rendering."""
    if len(corpus) == 0:
        raise ValueError("corpus is empty")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    banks = {}
    for sid, rec in corpus.records.items():
        key = (rec.model_id, rec.view)
        if key in banks:
            raise ValueError(f"two renderings for {key}")
        pts = blue_noise_sample(corpus.image(sid), points_per_model, rng)
        if not pts:
            raise ValueError(f"sketch {sid} has no ink to sample")
        banks[key] = build_index(model, corpus.image(sid), list(enumerate(pts)), sid).descriptors
    return RetrievalIndex(banks, points_per_model)


@dataclass
class RetrievalResult:
    ranking: list  # [(model_id, score)] ascending
    view: str
    per_view: dict  # model_id -> {view: score}

    def to_json(self) -> str:
        obj = {"ranking": [{"model_id": m, "score": s} for m, s in self.ranking], "view": self.view,
               "per_view": self.per_view}
        return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def score_models(query: np.ndarray, index: RetrievalIndex) -> tuple[dict, dict]:
    """Mean-of-min distances per model (all views pooled) and per (model, view)."""
    mins = {key: cdist(query, bank).min(axis=1) for key, bank in index.banks.items()}
    per_view, overall = {}, {}
    for m in index.model_ids:
        vs = index.views_of(m)
        per_view[m] = {v: float(mins[(m, v)].mean()) for v in vs}
        overall[m] = float(np.min(np.stack([mins[(m, v)] for v in vs]), axis=0).mean())
    return overall, per_view


def retrieve(query_image: SketchImage, model: EmbedderModel, index: RetrievalIndex, top_k: int = 10,
             rng: np.random.Generator | int = 0, n_query: int = QUERY_POINTS) -> RetrievalResult:
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    pts = blue_noise_sample(query_image, n_query, rng)
    if not pts:
        raise ValueError("query sketch has no ink")
    q = build_index(model, query_image, list(enumerate(pts))).descriptors
    overall, per_view = score_models(q, index)
    ranking = sorted(overall.items(), key=lambda kv: (kv[1], str(kv[0])))[:top_k]
    top = ranking[0][0]
    view = min(per_view[top].items(), key=lambda kv: (kv[1], kv[0]))[0]
    return RetrievalResult(ranking, view, {m: per_view[m] for m, _ in ranking})
