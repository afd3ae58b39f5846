"""Soft-margin SVM part labelling on top of point descriptors."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist, pdist
from sklearn.svm import SVC

from ..canvas import Point2D, SketchImage
from ..dataset.bluenoise import blue_noise_sample
from ..embedder import EmbedderModel
from ..matching import build_index

KERNELS = ("rbf", "linear")


def kernel_matrix(x: np.ndarray, y: np.ndarray, kernel: str, gamma: float) -> np.ndarray:
    x, y = np.asarray(x, np.float64), np.asarray(y, np.float64)
    if kernel == "linear":
        return x @ y.T
    if kernel == "rbf":
        return np.exp(-gamma * cdist(x, y, "sqeuclidean"))
    raise ValueError(f"unknown kernel {kernel!r}")


@dataclass
class BinaryMachine:
    """f(x) = sum_i coef_i K(sv_i, x) + b, with coef_i = alpha_i y_i."""

    label: object
    support_vectors: np.ndarray
    coef: np.ndarray
    bias: float
    slack: np.ndarray  # per training sample, max(0, 1 - y f(x))
    objective: float

    def decision(self, x: np.ndarray, kernel: str, gamma: float) -> np.ndarray:
        if len(self.coef) == 0:
            return np.full(len(x), self.bias)
        return kernel_matrix(x, self.support_vectors, kernel, gamma) @ self.coef + self.bias


@dataclass
class SegmenterModel:
    labels: list
    kernel: str = "rbf"
    C: float = 1.0
    gamma: float = 1.0
    machines: list = field(default_factory=list)

    def __post_init__(self):
        if self.C <= 0:
            raise ValueError("C must be positive")
        if self.kernel not in KERNELS:
            raise ValueError(f"unknown kernel {self.kernel!r}")

    @property
    def constant(self) -> bool:
        return len(self.labels) == 1

    def decision_function(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, np.float64))
        if self.constant:
            return np.zeros(len(x))
        vals = np.stack([m.decision(x, self.kernel, self.gamma) for m in self.machines], axis=1)
        return vals[:, 0] if len(self.labels) == 2 else vals

    def predict(self, x) -> list:
        x = np.atleast_2d(np.asarray(x, np.float64))
        if self.constant:
            return [self.labels[0]] * len(x)
        f = self.decision_function(x)
        if len(self.labels) == 2:
            return [self.labels[1] if v > 0 else self.labels[0] for v in f]
        return [self.labels[k] for k in np.argmax(f, axis=1)]

    def to_json(self) -> str:
        obj = {"labels": self.labels, "kernel": self.kernel, "C": self.C, "gamma": self.gamma,
               "machines": [{"label": m.label, "support_vectors": m.support_vectors.tolist(),
                             "coef": m.coef.tolist(), "bias": m.bias, "slack": m.slack.tolist(),
                             "objective": m.objective} for m in self.machines]}
        return json.dumps(obj, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SegmenterModel":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        machines = [BinaryMachine(m["label"], np.array(m["support_vectors"], dtype=np.float64).reshape(len(m["coef"]), -1),
                                  np.array(m["coef"]), float(m["bias"]), np.array(m["slack"]), float(m["objective"]))
                    for m in obj["machines"]]
        return cls(obj["labels"], obj["kernel"], float(obj["C"]), float(obj["gamma"]), machines)


def default_gamma(x: np.ndarray) -> float:
    """1 / median squared pairwise distance, frozen at training time.

    The per-entry variance ('scale') is dominated by per-dimension offsets of
    the descriptors and leaves the kernel nearly constant.
    """
    x = np.asarray(x, np.float64)
    if len(x) < 2:
        return 1.0
    d2 = pdist(x, "sqeuclidean")
    d2 = d2[d2 > 0]
    return 1.0 / float(np.median(d2)) if len(d2) else 1.0


def fit_binary(x: np.ndarray, y: np.ndarray, C: float, kernel: str, gamma: float, label=None) -> BinaryMachine:
    """y in {-1, +1}; solves the soft-margin dual with libsvm."""
    svc = SVC(C=C, kernel=kernel, gamma=gamma, tol=1e-6, shrinking=False, max_iter=-1)
    svc.fit(x, y)
    # libsvm orders classes ascending, so the decision is positive for +1
    sv = x[svc.support_]
    coef = svc.dual_coef_[0].astype(np.float64)
    b = float(svc.intercept_[0])
    k_sv = kernel_matrix(sv, sv, kernel, gamma)
    f = kernel_matrix(x, sv, kernel, gamma) @ coef + b
    slack = np.maximum(0.0, 1.0 - y * f)
    objective = 0.5 * float(coef @ k_sv @ coef) + C * float(slack.sum())
    return BinaryMachine(label, sv, coef, b, slack, objective)


def train_segmenter(samples, C: float = 1.0, kernel: str = "rbf", gamma: float | None = None) -> SegmenterModel:
    """``samples`` is a list of (descriptor, label); one-vs-rest above two labels."""
    if not samples:
        raise ValueError("no training samples")
    x = np.array([np.asarray(d, np.float64) for d, _ in samples])
    labels_seq = [lab for _, lab in samples]
    labels = sorted(set(labels_seq), key=str)
    gamma = default_gamma(x) if gamma is None else float(gamma)
    seg = SegmenterModel(labels, kernel, float(C), gamma)
    if len(labels) == 1:
        return seg
    targets = labels[1:] if len(labels) == 2 else labels
    for lab in targets:
        y = np.array([1.0 if v == lab else -1.0 for v in labels_seq])
        seg.machines.append(fit_binary(x, y, C, kernel, gamma, lab))
    return seg


def segment(image: SketchImage, model: EmbedderModel, seg: SegmenterModel, n_samples: int,
            rng: np.random.Generator) -> list[tuple[Point2D, object]]:
    pts = blue_noise_sample(image, n_samples, rng)
    if not pts:
        return []
    index = build_index(model, image, list(enumerate(pts)))
    return list(zip(pts, seg.predict(index.descriptors)))


def labelled_descriptors(corpus, model: EmbedderModel, sketch_ids) -> list:
    """(descriptor, part label) for every labelled point of the given sketches."""
    out = []
    for sid in sketch_ids:
        rec = corpus.records[sid]
        pts = {pid: p for pid, p in rec.points.items() if pid in rec.labels}
        index = build_index(model, corpus.image(sid), pts, sid)
        out += [(d, rec.labels[pid]) for pid, d in zip(index.point_ids, index.descriptors)]
    return out


PALETTE = [(228, 26, 28), (55, 126, 184), (77, 175, 74), (152, 78, 163), (255, 127, 0), (166, 86, 40)]


def save_overlay(image: SketchImage, result, labels, path, radius: int = 2) -> None:
    from PIL import Image, ImageDraw

    gray = np.clip(np.rint(image.pixels * 255), 0, 255).astype(np.uint8)
    canvas = Image.fromarray(gray, mode="L").convert("RGB")
    draw = ImageDraw.Draw(canvas)
    colour = {lab: PALETTE[k % len(PALETTE)] for k, lab in enumerate(labels)}
    for p, lab in result:
        draw.ellipse([p.x - radius, p.y - radius, p.x + radius, p.y + radius], fill=colour[lab])
    canvas.save(path)


def write_segmentation_jsonl(result, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p, lab in result:
            fh.write(json.dumps({"x": p.x, "y": p.y, "label": lab}) + "\n")
