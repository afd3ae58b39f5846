"""Sample groups and view/category balanced positive-pair scheduling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Corpus


class SchedulingError(RuntimeError):
    pass


@dataclass
class SampleGroup:
    members: list  # sample indices into corpus.samples
    group_id: int = 0

    def __post_init__(self):
        if not len(self.members):
            raise SchedulingError(f"group {self.group_id} is empty")


@dataclass
class BatchSpec:
    """Triplets per step.  Every (view, category) cell receives the same quota.

    The quota is ``batch_size // (n_views * n_categories)`` so the emitted
    batch holds ``quota * n_views * n_categories`` pairs, which equals
    ``batch_size`` whenever it divides evenly.
    """

    batch_size: int = 64

    def __post_init__(self):
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")

    def cell_quota(self, n_views: int, n_categories: int) -> int:
        q = self.batch_size // (n_views * n_categories)
        if q < 1:
            raise SchedulingError(f"batch_size {self.batch_size} cannot cover "
                                  f"{n_views} views x {n_categories} categories")
        return q

    def per_view_quota(self, n_views: int, n_categories: int) -> int:
        return self.cell_quota(n_views, n_categories) * n_categories

    def per_category_quota(self, n_views: int, n_categories: int) -> int:
        return self.cell_quota(n_views, n_categories) * n_views


def make_groups(n_samples: int, group_size: int, rng: np.random.Generator, members=None) -> list[SampleGroup]:
    """Uniform random partition of the samples into groups of ``group_size``."""
    idx = np.arange(n_samples) if members is None else np.asarray(members)
    idx = idx[rng.permutation(len(idx))]
    return [SampleGroup(idx[s:s + group_size].tolist(), g)
            for g, s in enumerate(range(0, len(idx), group_size))]


def sample_cells(corpus: Corpus) -> list[tuple[str, str]]:
    """(view, category) of every sample, aligned with ``corpus.samples``."""
    rec = corpus.records
    return [(rec[sid].view, rec[sid].category) for sid, _ in corpus.samples]


def candidate_pairs(corpus: Corpus, pool=None) -> dict:
    """Ordered positive pairs (anchor, positive) inside ``pool`` keyed by the anchor's cell."""
    partners = corpus.partners
    cells = sample_cells(corpus)
    members = range(len(corpus.samples)) if pool is None else pool
    inside = set(members)
    out: dict = {(v, c): [] for v in corpus.views for c in corpus.categories}
    for i in members:
        for j in sorted(partners[i] & inside):
            out[cells[i]].append((i, j))
    return out


def balanced_index_pairs(corpus: Corpus, quota: int, rng: np.random.Generator, pool=None,
                         candidates: dict | None = None) -> list[tuple[int, int]]:
    cand = candidate_pairs(corpus, pool) if candidates is None else candidates
    short = {cell: len(p) for cell, p in cand.items() if len(p) < quota}
    if short:
        listing = ", ".join(f"{v}/{c} has {n}" for (v, c), n in sorted(short.items()))
        raise SchedulingError(f"need {quota} pairs per (view, category) cell; deficient: {listing}")
    batch = []
    for cell in sorted(cand):
        pairs = cand[cell]
        pick = rng.choice(len(pairs), size=quota, replace=False)
        batch += [pairs[k] for k in pick]
    order = rng.permutation(len(batch))
    return [batch[k] for k in order]


def build_balanced_minibatch(corpus: Corpus, spec: BatchSpec, rng: np.random.Generator, pool=None):
    """Positive pairs with identical counts per view and per category.

    Returns ``(anchor_ref, positive_ref)`` pairs where a ref is a
    ``(sketch_id, point_id)`` tuple.
    """
    q = spec.cell_quota(len(corpus.views), len(corpus.categories))
    samples = corpus.samples
    return [(samples[i], samples[j]) for i, j in balanced_index_pairs(corpus, q, rng, pool)]
