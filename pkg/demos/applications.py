"""Morph, part-label and retrieve with a trained checkpoint.

    python demos/applications.py --model demo_out/model --out demo_apps

Uses a fresh toy corpus (same generator seed as toy_pipeline.py), so the
held-out shapes were never seen in training.
"""
import argparse
from pathlib import Path

import numpy as np

from zoomdesc.apps import (MorphConfig, build_retrieval_index, labelled_descriptors, morph, retrieve, save_overlay,
                           segment, train_segmenter)
from zoomdesc.canvas import save_png
from zoomdesc.dataset import ToyConfig, generate_toy_corpus
from zoomdesc.dataset.toy import shape_split
from zoomdesc.embedder import load_checkpoint

ap = argparse.ArgumentParser()
ap.add_argument("--model", required=True)
ap.add_argument("--out", default="demo_apps")
args = ap.parse_args()
out = Path(args.out)
out.mkdir(parents=True, exist_ok=True)
model = load_checkpoint(args.model)
corpus = generate_toy_corpus(ToyConfig(n_categories=4, shapes_per_category=10, points_per_shape=30), 0)
tr, te = shape_split(corpus, 2)
cat = sorted(te.by_category())[0]
held = te.by_category()[cat]

# morph between two held-out shapes of one category
res = morph(te.image(held[0]), te.image(held[3]), model, MorphConfig(steps=24), rng=0)
for s in (0, 6, 12, 18, 24):
    save_png(res.frames[s], out / f"morph_{s:02d}.png")
print("morph confidences:", " ".join(f"{c.confidence:.2f}" for c in res.correspondences))

# parts from two labelled training sketches, applied to an unseen one
seg = train_segmenter(labelled_descriptors(tr, model, tr.by_category()[cat][:2]))
labels = segment(te.image(held[1]), model, seg, 150, np.random.default_rng(0))
save_overlay(te.image(held[1]), labels, seg.labels, out / "segmentation.png")
print("segment labels:", {lab: sum(1 for _, l in labels if l == lab) for lab in seg.labels})

# retrieval over the held-out models
index = build_retrieval_index(te, model, rng=0)
for sid in held[:3]:
    r = retrieve(te.image(sid), model, index, top_k=3, rng=1)
    print(f"query {sid}: " + ", ".join(f"{m} ({s:.3f})" for m, s in r.ranking) + f"  view={r.view}")
