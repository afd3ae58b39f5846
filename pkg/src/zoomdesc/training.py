"""Triplet / contrastive objectives, on-the-fly semi-hard mining and the Adam loop."""
from __future__ import annotations

import copy
import csv
import io
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .canvas import AugmentConfig, Augmenter
from .dataset.batching import (BatchSpec, SampleGroup, SchedulingError, balanced_index_pairs,
                               candidate_pairs, make_groups)
from .dataset.corpus import Corpus
from .embedder import EmbedderModel, ShapeError, embed_crops, save_checkpoint

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, last_good_state=None, step=None):
        super().__init__(msg)
        self.last_good_state = last_good_state
        self.step = step


def _is_torch(*xs):
    return any(isinstance(x, torch.Tensor) for x in xs)


def squared_distance(a, b):
    if _is_torch(a, b):
        return ((a - b) ** 2).sum(-1)
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"descriptor shapes differ: {a.shape} vs {b.shape}")
    return ((a - b) ** 2).sum(-1)


def triplet_loss(ya, yc, yn, margin: float = 1.0):
    """max(D^2(a, c) - D^2(a, n) + margin, 0), per triplet along the leading axes."""
    if _is_torch(ya, yc, yn):
        if not (ya.shape == yc.shape == yn.shape):
            raise ShapeError("triplet descriptors must share a shape")
        return torch.clamp(squared_distance(ya, yc) - squared_distance(ya, yn) + margin, min=0.0)
    ya, yc, yn = (np.asarray(v, dtype=np.float64) for v in (ya, yc, yn))
    if not (ya.shape == yc.shape == yn.shape):
        raise ShapeError("triplet descriptors must share a shape")
    out = np.maximum(squared_distance(ya, yc) - squared_distance(ya, yn) + margin, 0.0)
    return float(out) if out.ndim == 0 else out


def is_semi_hard(ya, yc, yn, margin: float = 1.0):
    """D^2(a, c) < D^2(a, n) < D^2(a, c) + margin, both strict."""
    dp = squared_distance(ya, yc)
    dn = squared_distance(ya, yn)
    out = (dp < dn) & (dn < dp + margin)
    return bool(out) if np.ndim(out) == 0 else out


def contrastive_loss(ya, yb, same, margin: float = 1.0):
    """D^2 for matching pairs, max(margin - D, 0)^2 otherwise."""
    if _is_torch(ya, yb):
        d2 = squared_distance(ya, yb)
        d = torch.sqrt(d2 + 1e-12)
        same = torch.as_tensor(same, dtype=torch.bool)
        return torch.where(same, d2, torch.clamp(margin - d, min=0.0) ** 2)
    d2 = squared_distance(ya, yb)
    same = np.asarray(same, dtype=bool)
    out = np.where(same, d2, np.maximum(margin - np.sqrt(d2), 0.0) ** 2)
    return float(out) if out.ndim == 0 else out


@dataclass
class TrainConfig:
    margin: float = 1.0
    lr: float = 1e-5
    epochs: int = 185
    batch_size: int = 64
    negatives_per_probe: int = 5
    group_size: int = 256
    betas: tuple = (0.9, 0.999)
    seed: int = 0
    loss: str = "triplet"
    contrastive_margin: float = 1.0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.negatives_per_probe < 1:
            raise ValueError("negatives_per_probe must be >= 1")
        if self.batch_size <= 0 or self.group_size <= 0:
            raise ValueError("batch_size and group_size must be positive")
        if self.loss not in ("triplet", "contrastive"):
            raise ValueError(f"unknown loss {self.loss!r}")
        self.betas = tuple(self.betas)
        if isinstance(self.augment, dict):
            aug = dict(self.augment)
            for k in ("rotation_range", "downsample_factors"):
                if k in aug:
                    aug[k] = tuple(aug[k])
            self.augment = AugmentConfig(**aug)

    @classmethod
    def desk_scale(cls, **kw) -> "TrainConfig":
        """Settings that train a reduced-width model from scratch in minutes."""
        base = dict(epochs=20, lr=1e-3)
        base.update(kw)
        return cls(**base)

    @classmethod
    def from_toml(cls, path, **overrides) -> "TrainConfig":
        import tomli

        with open(path, "rb") as fh:
            raw = tomli.load(fh)
        raw = raw.get("train", raw)
        known = {f.name for f in fields(cls)}
        extra = set(raw) - known
        if extra:
            raise ValueError(f"unknown train config keys: {sorted(extra)}")
        raw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**raw)


@dataclass
class Triplet:
    anchor: int
    positive: int
    negative: int
    ya: np.ndarray
    yc: np.ndarray
    yn: np.ndarray


def _cell_quota(corpus: Corpus, spec: BatchSpec, cand: dict) -> int:
    """The spec quota, shrunk to what the scarcest cell of this group can supply."""
    q = spec.cell_quota(len(corpus.views), len(corpus.categories))
    return min(q, min(len(v) for v in cand.values()))


def mine_semi_hard(corpus: Corpus, group: SampleGroup, descriptors: np.ndarray, spec: BatchSpec,
                   cfg: TrainConfig, rng: np.random.Generator, pairs=None) -> list[Triplet]:
    """Semi-hard triplets from balanced positive pairs inside one group.

    ``descriptors`` is aligned with ``group.members`` and holds the current
    network's output.  Each pair probes up to ``negatives_per_probe`` random
    non-correspondents and keeps the first semi-hard one; pairs without a
    hit are dropped.
    """
    members = list(group.members)
    if not members:
        raise SchedulingError("empty group")
    pos = {m: k for k, m in enumerate(members)}
    if pairs is None:
        cand = candidate_pairs(corpus, members)
        q = _cell_quota(corpus, spec, cand)
        if q < 1:
            return []
        pairs = balanced_index_pairs(corpus, q, rng, members, cand)
    partners = corpus.partners
    out = []
    for a, c in pairs:
        exclude = partners[a]
        negatives = [m for m in members if m != a and m not in exclude]
        if not negatives:
            continue
        probes = rng.choice(len(negatives), size=min(cfg.negatives_per_probe, len(negatives)), replace=False)
        ya, yc = descriptors[pos[a]], descriptors[pos[c]]
        for k in probes:
            n = negatives[k]
            yn = descriptors[pos[n]]
            if is_semi_hard(ya, yc, yn, cfg.margin):
                out.append(Triplet(a, c, n, ya, yc, yn))
                break
    return out


def brute_force_semi_hard(corpus: Corpus, group: SampleGroup, descriptors: np.ndarray, margin: float) -> set:
    """Every (anchor, positive, negative) in the group satisfying the semi-hard test."""
    members = list(group.members)
    partners = corpus.partners
    out = set()
    for ia, a in enumerate(members):
        for ic, c in enumerate(members):
            if c not in partners[a]:
                continue
            for i_n, n in enumerate(members):
                if n == a or n in partners[a]:
                    continue
                if is_semi_hard(descriptors[ia], descriptors[ic], descriptors[i_n], margin):
                    out.add((a, c, n))
    return out


@dataclass
class StepRecord:
    step: int
    epoch: int
    mean_loss: float
    yield_: float
    n_triplets: int


@dataclass
class History:
    steps: list = field(default_factory=list)

    def append(self, rec: StepRecord):
        self.steps.append(rec)

    @property
    def losses(self) -> np.ndarray:
        return np.array([s.mean_loss for s in self.steps])

    @property
    def yields(self) -> np.ndarray:
        return np.array([s.yield_ for s in self.steps])

    def epoch_means(self) -> dict:
        out: dict = {}
        for s in self.steps:
            out.setdefault(s.epoch, []).append(s.mean_loss)
        return {e: float(np.mean(v)) for e, v in out.items()}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "epoch", "mean_loss", "yield", "n_triplets"])
        for s in self.steps:
            w.writerow([s.step, s.epoch, repr(float(s.mean_loss)), repr(float(s.yield_)), s.n_triplets])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")


def group_crops(corpus: Corpus, members, augmenter: Augmenter, rng: np.random.Generator) -> np.ndarray:
    """Augmented zoom stacks for the group, aligned with ``members``."""
    samples = corpus.samples
    by_sketch: dict = {}
    for k, m in enumerate(members):
        by_sketch.setdefault(samples[m][0], []).append(k)
    nz = len(augmenter.fractions)
    out = np.empty((len(members), nz, augmenter.crop_size, augmenter.crop_size), dtype=np.float32)
    for sid in sorted(by_sketch):
        ks = by_sketch[sid]
        rec = corpus.records[sid]
        pts = rec.point_array([samples[members[k]][1] for k in ks])
        out[ks] = augmenter.crops(sid, corpus.image(sid), pts, rng)
    return out


def make_optimizer(model: EmbedderModel, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas)


def train_step(model: EmbedderModel, optimizer, crops: np.ndarray, anchors, positives, negatives,
               cfg: TrainConfig) -> float:
    """One optimizer update on index triplets into ``crops``; returns the mean loss.

    For the contrastive objective ``negatives`` pair with ``anchors`` as the
    non-matching pairs.
    """
    model.train()
    used = sorted(set(anchors) | set(positives) | set(negatives))
    where = {u: k for k, u in enumerate(used)}
    dtype = next(model.parameters()).dtype
    out = model(torch.as_tensor(crops[used], dtype=dtype))
    ia = torch.tensor([where[i] for i in anchors])
    ic = torch.tensor([where[i] for i in positives])
    i_n = torch.tensor([where[i] for i in negatives])
    ya, yc, yn = out[ia], out[ic], out[i_n]
    if cfg.loss == "triplet":
        loss = triplet_loss(ya, yc, yn, cfg.margin).mean()
    else:
        same = torch.cat([torch.ones(len(ia), dtype=torch.bool), torch.zeros(len(ia), dtype=torch.bool)])
        loss = contrastive_loss(torch.cat([ya, ya]), torch.cat([yc, yn]), same, cfg.contrastive_margin).mean()
    value = float(loss.detach())
    if not np.isfinite(value):
        return value
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return value


def _random_negatives(corpus: Corpus, members, pairs, rng) -> list[int]:
    partners = corpus.partners
    out = []
    for a, _ in pairs:
        negs = [m for m in members if m != a and m not in partners[a]]
        out.append(negs[int(rng.integers(len(negs)))] if negs else a)
    return out


def train(corpus: Corpus, model: EmbedderModel, cfg: TrainConfig, spec: BatchSpec | None = None,
          progress=None) -> tuple[EmbedderModel, History]:
    """Train ``model`` in place; fully determined by ``cfg.seed``."""
    spec = spec or BatchSpec(cfg.batch_size)
    if not corpus.correspondences:
        raise SchedulingError("corpus has no correspondences to train on")
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    group_rng, batch_rng, aug_rng = (np.random.default_rng(s) for s in seeds)
    torch.manual_seed(cfg.seed)
    optimizer = make_optimizer(model, cfg)
    augmenter = Augmenter(cfg.augment, model.zoom_fractions, model.crop_size)
    history = History()
    last_good = copy.deepcopy(model.state_dict())
    step = 0
    for epoch in range(cfg.epochs):
        groups = make_groups(len(corpus.samples), cfg.group_size, group_rng)
        for group in groups:
            crops = group_crops(corpus, group.members, augmenter, aug_rng)
            cand = candidate_pairs(corpus, group.members)
            q = _cell_quota(corpus, spec, cand)
            pairs = balanced_index_pairs(corpus, q, batch_rng, group.members, cand) if q >= 1 else []
            if cfg.loss == "triplet":
                desc = embed_crops(model, crops)
                trips = mine_semi_hard(corpus, group, desc, spec, cfg, batch_rng, pairs=pairs)
                a = [t.anchor for t in trips]
                c = [t.positive for t in trips]
                n = [t.negative for t in trips]
            else:
                a = [p[0] for p in pairs]
                c = [p[1] for p in pairs]
                n = _random_negatives(corpus, group.members, pairs, batch_rng)
            pos = {m: k for k, m in enumerate(group.members)}
            loss = 0.0
            if a:
                loss = train_step(model, optimizer, crops, [pos[i] for i in a], [pos[i] for i in c],
                                  [pos[i] for i in n], cfg)
                if not np.isfinite(loss):
                    model.load_state_dict(last_good)
                    if cfg.checkpoint_dir:
                        save_checkpoint(model, Path(cfg.checkpoint_dir) / "last_good")
                    raise TrainingDiverged(f"non-finite loss at step {step}", last_good, step)
            yld = len(a) / len(pairs) if pairs else 0.0
            history.append(StepRecord(step, epoch, loss, yld, len(a)))
            step += 1
        last_good = copy.deepcopy(model.state_dict())
        if progress is not None:
            progress(epoch, history)
        log.info("epoch %d mean loss %.4f", epoch, history.epoch_means().get(epoch, float("nan")))
        if cfg.checkpoint_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(model, Path(cfg.checkpoint_dir) / f"epoch_{epoch + 1:03d}")
    model.eval()
    return model, history
