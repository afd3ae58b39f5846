"""Corpus records, correspondence sets and the JSON Lines manifest."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..canvas import Point2D, SketchImage, load_png, save_png

VIEWS = ("front", "right", "front_right")
MANIFEST = "manifest.jsonl"


class ManifestError(ValueError):
    """Raised when a manifest line violates the schema or cross-references."""


@dataclass
class SketchRecord:
    sketch_id: str
    category: str
    view: str
    image_path: str
    points: dict = field(default_factory=dict)  # point_id -> Point2D, insertion ordered
    labels: dict = field(default_factory=dict)  # point_id -> part label (optional)
    shape_id: str | None = None
    meta: dict = field(default_factory=dict)

    @property
    def model_id(self) -> str:
        return self.shape_id if self.shape_id is not None else self.sketch_id

    def point_array(self, ids=None) -> np.ndarray:
        ids = list(self.points) if ids is None else ids
        return np.array([[self.points[i].x, self.points[i].y] for i in ids], dtype=np.float64).reshape(-1, 2)


@dataclass
class CorrespondenceSet:
    sketch_a: str
    sketch_b: str
    pairs: list  # [(point_id_a, point_id_b), ...]

    def reversed(self) -> "CorrespondenceSet":
        return CorrespondenceSet(self.sketch_b, self.sketch_a, [(b, a) for a, b in self.pairs])

    def as_map(self) -> dict:
        return dict(self.pairs)


class Corpus:
    """Immutable-after-construction collection of sketches and correspondences."""

    def __init__(self, records, correspondences, root=None, images=None):
        self.records: dict[str, SketchRecord] = {}
        for r in records:
            if r.sketch_id in self.records:
                raise ManifestError(f"duplicate sketch_id {r.sketch_id!r}")
            self.records[r.sketch_id] = r
        self.root = Path(root) if root is not None else None
        self._images: dict[str, SketchImage] = dict(images or {})
        self.correspondences: list[CorrespondenceSet] = []
        self._pairs: dict[tuple, CorrespondenceSet] = {}
        for c in correspondences:
            self._add_correspondence(c)
        self._samples = None
        self._partners = None

    def _add_correspondence(self, c: CorrespondenceSet):
        for sid in (c.sketch_a, c.sketch_b):
            if sid not in self.records:
                raise ManifestError(f"correspondence references unknown sketch_id {sid!r}")
        if c.sketch_a == c.sketch_b:
            raise ManifestError(f"correspondence set pairs sketch {c.sketch_a!r} with itself")
        ra, rb = self.records[c.sketch_a], self.records[c.sketch_b]
        seen_a, seen_b = set(), set()
        pairs = []
        for pa, pb in c.pairs:
            if pa not in ra.points:
                raise ManifestError(f"unknown point_id {pa!r} in sketch {c.sketch_a!r}")
            if pb not in rb.points:
                raise ManifestError(f"unknown point_id {pb!r} in sketch {c.sketch_b!r}")
            if pa in seen_a or pb in seen_b:
                raise ManifestError(f"correspondence {c.sketch_a!r}-{c.sketch_b!r} is not a partial bijection")
            seen_a.add(pa)
            seen_b.add(pb)
            pairs.append((pa, pb))
        key = (c.sketch_a, c.sketch_b)
        if key in self._pairs or key[::-1] in self._pairs:
            raise ManifestError(f"duplicate correspondence set {key}")
        c = CorrespondenceSet(c.sketch_a, c.sketch_b, pairs)
        self.correspondences.append(c)
        self._pairs[key] = c

    def __len__(self):
        return len(self.records)

    def __eq__(self, other):
        if not isinstance(other, Corpus):
            return NotImplemented
        return (list(self.records.values()) == list(other.records.values())
                and self.correspondences == other.correspondences)

    @property
    def categories(self) -> list[str]:
        return sorted({r.category for r in self.records.values()})

    @property
    def views(self) -> list[str]:
        return sorted({r.view for r in self.records.values()})

    def by_category(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for r in self.records.values():
            out.setdefault(r.category, []).append(r.sketch_id)
        return out

    def pairs(self, a: str, b: str) -> CorrespondenceSet | None:
        """Correspondences between two sketches in either stored orientation."""
        if (a, b) in self._pairs:
            return self._pairs[(a, b)]
        if (b, a) in self._pairs:
            return self._pairs[(b, a)].reversed()
        return None

    def image(self, sketch_id: str) -> SketchImage:
        if sketch_id not in self._images:
            rec = self.records[sketch_id]
            path = Path(rec.image_path)
            if not path.is_absolute() and self.root is not None:
                path = self.root / path
            if not path.exists():
                raise FileNotFoundError(f"image for sketch {sketch_id!r} not found at {path}")
            self._images[sketch_id] = load_png(path)
        return self._images[sketch_id]

    def subset(self, sketch_ids) -> "Corpus":
        keep = [s for s in self.records if s in set(sketch_ids)]
        ks = set(keep)
        corr = [c for c in self.correspondences if c.sketch_a in ks and c.sketch_b in ks]
        imgs = {k: v for k, v in self._images.items() if k in ks}
        return Corpus([self.records[s] for s in keep], corr, self.root, imgs)

    # flattened (sketch, point) samples used by batching and mining
    @property
    def samples(self) -> list[tuple[str, str]]:
        if self._samples is None:
            self._samples = [(r.sketch_id, pid) for r in self.records.values() for pid in r.points]
        return self._samples

    @property
    def partners(self) -> list[set]:
        """For every sample index, the indices of its ground-truth correspondents."""
        if self._partners is None:
            index = {s: i for i, s in enumerate(self.samples)}
            partners = [set() for _ in self.samples]
            for c in self.correspondences:
                for pa, pb in c.pairs:
                    i, j = index[(c.sketch_a, pa)], index[(c.sketch_b, pb)]
                    partners[i].add(j)
                    partners[j].add(i)
            self._partners = partners
        return self._partners


def _record_to_json(r: SketchRecord) -> dict:
    obj = {"kind": "sketch", "sketch_id": r.sketch_id, "category": r.category, "view": r.view,
           "image": r.image_path, "points": [[pid, p.x, p.y] for pid, p in r.points.items()]}
    if r.labels:
        obj["labels"] = r.labels
    if r.shape_id is not None:
        obj["shape"] = r.shape_id
    if r.meta:
        obj["meta"] = r.meta
    return obj


def save_corpus(corpus: Corpus, directory) -> Path:
    """Write manifest.jsonl plus every image under ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for sid, rec in corpus.records.items():
        img = corpus.image(sid)
        path = d / rec.image_path
        path.parent.mkdir(parents=True, exist_ok=True)
        save_png(img, path)
    lines = [_record_to_json(r) for r in corpus.records.values()]
    lines += [{"kind": "corr", "a": c.sketch_a, "b": c.sketch_b, "pairs": [list(p) for p in c.pairs]}
              for c in corpus.correspondences]
    out = d / MANIFEST
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        for obj in lines:
            fh.write(json.dumps(obj, separators=(",", ":")) + "\n")
    return out


def _require(obj, key, types, where):
    if key not in obj:
        raise ManifestError(f"{where}: missing field {key!r}")
    if not isinstance(obj[key], types):
        raise ManifestError(f"{where}: field {key!r} has wrong type {type(obj[key]).__name__}")
    return obj[key]


def _parse_sketch(obj, where) -> SketchRecord:
    sid = _require(obj, "sketch_id", str, where)
    where = f"{where} (sketch {sid!r})"
    pts = {}
    for item in _require(obj, "points", list, where):
        if not (isinstance(item, list) and len(item) == 3):
            raise ManifestError(f"{where}: points entries must be [point_id, x, y]")
        pid, x, y = item
        if pid in pts:
            raise ManifestError(f"{where}: duplicate point_id {pid!r}")
        if not all(isinstance(v, (int, float)) for v in (x, y)):
            raise ManifestError(f"{where}: non-numeric coordinates for point {pid!r}")
        pts[pid] = Point2D(float(x), float(y))
    return SketchRecord(sid, _require(obj, "category", str, where), _require(obj, "view", str, where),
                        _require(obj, "image", str, where), pts, dict(obj.get("labels", {})),
                        obj.get("shape"), dict(obj.get("meta", {})))


def load_corpus(manifest_path, check_images: bool = True) -> Corpus:
    """Parse a manifest and cross-reference every sketch and correspondence."""
    path = Path(manifest_path)
    if path.is_dir():
        path = path / MANIFEST
    records, corrs = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path.name}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{where}: invalid JSON ({e.msg})") from None
            kind = obj.get("kind")
            if kind == "sketch":
                records.append(_parse_sketch(obj, where))
            elif kind == "corr":
                a = _require(obj, "a", str, where)
                b = _require(obj, "b", str, where)
                raw = _require(obj, "pairs", list, where)
                if not all(isinstance(p, list) and len(p) == 2 for p in raw):
                    raise ManifestError(f"{where}: pairs entries must be [pid_a, pid_b]")
                corrs.append(CorrespondenceSet(a, b, [tuple(p) for p in raw]))
            else:
                raise ManifestError(f"{where}: unknown record kind {kind!r}")
    try:
        corpus = Corpus(records, corrs, root=path.parent)
    except ManifestError as e:
        raise ManifestError(f"{path.name}: {e}") from None
    if check_images:
        for r in records:
            p = Path(r.image_path)
            p = p if p.is_absolute() else path.parent / p
            if not p.exists():
                raise FileNotFoundError(f"image for sketch {r.sketch_id!r} not found at {p}")
    return corpus
