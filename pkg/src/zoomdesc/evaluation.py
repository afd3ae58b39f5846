"""CMC / CAcc metrics and the all-pairs within-category benchmark."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .canvas import Point2D
from .dataset.corpus import CorrespondenceSet, Corpus
from .embedder import EmbedderModel
from .matching import DescriptorIndex, MatchResult, build_index, match_nn, perturb_image

DEFAULT_THRESHOLDS = tuple(round(0.01 * i, 2) for i in range(26))


@dataclass
class MetricCurve:
    values: np.ndarray  # percentages
    n_used: int
    n_excluded: int


def _gt_map(gt) -> dict:
    if isinstance(gt, CorrespondenceSet):
        return gt.as_map()
    return dict(gt)


def gt_ranks(results: list[MatchResult], gt) -> tuple[list[int], int]:
    """1-based rank of the ground-truth target for every source that has one."""
    gmap = _gt_map(gt)
    ranks, excluded = [], 0
    for r in results:
        target = gmap.get(r.source_point_id)
        ids = [t for t, _ in r.ranked_targets]
        if target is None or target not in ids:
            excluded += 1
            continue
        ranks.append(ids.index(target) + 1)
    return ranks, excluded


def cmc_from_ranks(ranks, K: int) -> np.ndarray:
    r = np.asarray(ranks)
    if len(r) == 0:
        return np.zeros(K)
    return np.array([100.0 * np.count_nonzero(r <= k) / len(r) for k in range(1, K + 1)])


def cmc(results: list[MatchResult], gt, K: int) -> MetricCurve:
    """curve[k-1] = % of sources whose true target is within the top k ranks."""
    ranks, excluded = gt_ranks(results, gt)
    return MetricCurve(cmc_from_ranks(ranks, K), len(ranks), excluded)


def match_errors(results: list[MatchResult], gt, target_points: dict) -> tuple[list[float], int]:
    """Pixel distance from each chosen target to the true target location."""
    gmap = _gt_map(gt)
    errs, excluded = [], 0
    for r in results:
        target = gmap.get(r.source_point_id)
        if target is None or target not in target_points:
            excluded += 1
            continue
        chosen = target_points[r.chosen[0]]
        truth = target_points[target]
        errs.append(float(np.hypot(chosen.x - truth.x, chosen.y - truth.y)))
    return errs, excluded


def cacc_from_errors(errors, image_side: float, thresholds) -> np.ndarray:
    e = np.asarray(errors, dtype=np.float64)
    if len(e) == 0:
        return np.zeros(len(thresholds))
    return np.array([100.0 * np.count_nonzero(e < t * image_side) / len(e) for t in thresholds])


def cacc(results: list[MatchResult], gt, target_points: dict, image_side: float,
         thresholds=DEFAULT_THRESHOLDS) -> MetricCurve:
    """% of chosen matches closer than ``t * image_side`` pixels to ground truth."""
    errs, excluded = match_errors(results, gt, target_points)
    return MetricCurve(cacc_from_errors(errs, image_side, thresholds), len(errs), excluded)


@dataclass
class BenchmarkConfig:
    top_k: int = 5
    cacc_threshold: float = 0.05
    pre_rotate_deg: float = 90.0
    max_zoom: float = 0.0
    seed: int = 0
    max_rank: int = 20
    thresholds: tuple = DEFAULT_THRESHOLDS
    categories: tuple = ()

    def __post_init__(self):
        self.thresholds = tuple(float(t) for t in self.thresholds)
        self.categories = tuple(self.categories)
        if self.cacc_threshold not in self.thresholds:
            self.thresholds = tuple(sorted(set(self.thresholds) | {float(self.cacc_threshold)}))
        self.max_rank = max(self.max_rank, self.top_k)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class EvalReport:
    cmc_curve: list
    cacc_curve: list
    cacc_thresholds: list
    cmc_at_k: float
    cacc_at_t: float
    top_k: int
    cacc_threshold: float
    n_points: int
    n_pairs: int
    n_skipped_pairs: int
    n_excluded_points: int
    per_category: dict
    per_pair: list
    perturbations: dict
    config: dict
    config_hash: str
    model: dict = field(default_factory=dict)

    @property
    def cmc_at_5(self) -> float:
        return self._cmc_at(5)

    @property
    def cacc_at_5pct(self) -> float:
        return self._cacc_at(0.05)

    def _cmc_at(self, k):
        return float(self.cmc_curve[k - 1]) if k <= len(self.cmc_curve) else float("nan")

    def _cacc_at(self, t):
        for tt, v in zip(self.cacc_thresholds, self.cacc_curve):
            if abs(tt - t) < 1e-12:
                return float(v)
        return float("nan")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cmc_at_5"] = self.cmc_at_5
        d["cacc_at_5pct"] = self.cacc_at_5pct
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    def write_pairs_csv(self, path) -> None:
        import csv

        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["a", "b", "category", "n_points", "cmc_at_k", "cacc_at_t"])
            for row in self.per_pair:
                w.writerow([row["a"], row["b"], row["category"], row["n_points"],
                            repr(row["cmc_at_k"]), repr(row["cacc_at_t"])])


def _sketch_rng(seed: int, ordinal: int) -> np.random.Generator:
    return np.random.default_rng([seed, ordinal])


def prepare_indexes(corpus: Corpus, model: EmbedderModel, sketch_ids, cfg: BenchmarkConfig):
    """One (optionally perturbed) descriptor index per sketch plus the draws used."""
    indexes, draws = {}, {}
    for sid in sketch_ids:
        rec = corpus.records[sid]
        image = corpus.image(sid)
        ordinal = list(corpus.records).index(sid)
        points = rec.points
        if cfg.pre_rotate_deg > 0 or cfg.max_zoom > 0:
            image, points, pert = perturb_image(image, points, cfg.pre_rotate_deg, cfg.max_zoom,
                                                _sketch_rng(cfg.seed, ordinal))
            draws[sid] = {"rotation": pert.rotation, "scale": pert.scale}
        indexes[sid] = (build_index(model, image, points, sid), image.side)
    return indexes, draws


def _point_map(index: DescriptorIndex) -> dict:
    return {pid: Point2D(float(x), float(y)) for pid, (x, y) in zip(index.point_ids, index.points)}


def run_benchmark(corpus: Corpus, model: EmbedderModel, cfg: BenchmarkConfig | None = None,
                  indexes=None) -> EvalReport:
    """Ranked NN matching over every ordered pair of sketches within each category."""
    cfg = cfg or BenchmarkConfig()
    groups = corpus.by_category()
    cats = [c for c in sorted(groups) if not cfg.categories or c in cfg.categories]
    if not any(len(groups[c]) >= 2 for c in cats):
        raise ValueError("benchmark needs at least two sketches in some category")
    wanted = [s for c in cats for s in groups[c]]
    draws = {}
    if indexes is None:
        indexes, draws = prepare_indexes(corpus, model, wanted, cfg)
    per_cat, per_pair = {}, []
    all_ranks, all_errs = [], []
    skipped, excluded_total, n_pairs = 0, 0, 0
    k, t = cfg.top_k, cfg.cacc_threshold
    for cat in cats:
        ranks, errs = [], []
        for a in groups[cat]:
            for b in groups[cat]:
                if a == b:
                    continue
                cs = corpus.pairs(a, b)
                ia, side_a = indexes[a]
                ib, side_b = indexes[b]
                gt = {} if cs is None else {pa: pb for pa, pb in cs.pairs
                                             if pa in set(ia.point_ids) and pb in set(ib.point_ids)}
                if not gt or len(ib) == 0:
                    skipped += 1
                    continue
                results = match_nn(ia.subset(list(gt)), ib, ranked=True)
                r, ex1 = gt_ranks(results, gt)
                e, _ = match_errors(results, gt, _point_map(ib))
                excluded_total += ex1
                ranks += r
                errs += [x / side_b for x in e]
                n_pairs += 1
                per_pair.append({"a": a, "b": b, "category": cat, "n_points": len(r),
                                 "cmc_at_k": float(cmc_from_ranks(r, k)[k - 1]),
                                 "cacc_at_t": float(cacc_from_errors([x / side_b for x in e], 1.0, [t])[0])})
        all_ranks += ranks
        all_errs += errs
        if ranks:
            per_cat[cat] = {"n_points": len(ranks),
                            "cmc_at_k": float(cmc_from_ranks(ranks, k)[k - 1]),
                            "cacc_at_t": float(cacc_from_errors(errs, 1.0, [t])[0])}
    if not all_ranks:
        raise ValueError("no correspondences were evaluated")
    cmc_curve = cmc_from_ranks(all_ranks, cfg.max_rank)
    # errors are already normalised by the target side
    cacc_curve = cacc_from_errors(all_errs, 1.0, cfg.thresholds)
    model_meta = {"backbone_id": model.spec.backbone_id, "d": model.d, "crop_size": model.crop_size,
                  "zoom_fractions": list(model.zoom_fractions)}
    return EvalReport(cmc_curve=[float(v) for v in cmc_curve], cacc_curve=[float(v) for v in cacc_curve],
                      cacc_thresholds=list(cfg.thresholds), cmc_at_k=float(cmc_curve[k - 1]),
                      cacc_at_t=float(cacc_curve[list(cfg.thresholds).index(t)]), top_k=k, cacc_threshold=t,
                      n_points=len(all_ranks), n_pairs=n_pairs, n_skipped_pairs=skipped,
                      n_excluded_points=excluded_total, per_category=per_cat, per_pair=per_pair,
                      perturbations=draws, config=asdict(cfg), config_hash=cfg.digest(), model=model_meta)


def plot_report(report: EvalReport, path, label: str = "model") -> None:
    """Two panels: CMC against rank and CAcc against normalised distance."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
    ranks = np.arange(1, len(report.cmc_curve) + 1)
    ax1.plot(ranks, report.cmc_curve, marker="o", ms=3, label=label)
    ax1.set_xlabel("rank")
    ax1.set_ylabel("% correct within rank")
    ax1.set_ylim(0, 100)
    ax2.plot(report.cacc_thresholds, report.cacc_curve, label=label)
    ax2.set_xlabel("normalised distance")
    ax2.set_ylabel("% matches below distance")
    ax2.set_ylim(0, 100)
    for ax in (ax1, ax2):
        ax.grid(alpha=0.3)
        ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
