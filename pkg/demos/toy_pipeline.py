"""Train a reduced-width embedder on the toy corpus and look at what it learned.

    python demos/toy_pipeline.py --out demo_out [--epochs 20]

Prints CMC@5 / CAcc@5% for the untrained and trained networks, with and
without the +-90 degree pre-rotation, and writes the curves to PNG.
"""
import argparse
from pathlib import Path

import torch

from zoomdesc.dataset import ToyConfig, generate_toy_corpus
from zoomdesc.dataset.toy import shape_split
from zoomdesc.embedder import build_model, save_checkpoint
from zoomdesc.evaluation import BenchmarkConfig, plot_report, run_benchmark
from zoomdesc.training import TrainConfig, train

ap = argparse.ArgumentParser()
ap.add_argument("--out", default="demo_out")
ap.add_argument("--epochs", type=int, default=20)
ap.add_argument("--seed", type=int, default=0)
args = ap.parse_args()
out = Path(args.out)
out.mkdir(parents=True, exist_ok=True)
torch.set_num_threads(max(1, torch.get_num_threads()))

corpus = generate_toy_corpus(ToyConfig(n_categories=4, shapes_per_category=10, points_per_shape=30), args.seed)
tr, te = shape_split(corpus, 2)
print(f"{len(tr)} training sketches, {len(te)} held out")

protocols = {"unrotated": BenchmarkConfig(pre_rotate_deg=0), "rotated": BenchmarkConfig(pre_rotate_deg=90)}


def show(tag, model):
    for name, cfg in protocols.items():
        rep = run_benchmark(te, model, cfg)
        print(f"  {tag:9s} {name:9s} CMC@5 {rep.cmc_at_5:5.1f}  CAcc@5% {rep.cacc_at_5pct:5.1f}")
        plot_report(rep, out / f"{tag}_{name}.png", label=f"{tag} / {name}")


model = build_model("alexnet", seed=args.seed, width=0.25, crop_size=64)
show("untrained", model.eval())


def progress(epoch, history):
    print(f"epoch {epoch:3d}  loss {history.epoch_means()[epoch]:.4f}  yield {history.yields[-10:].mean():.2f}")


train(tr, model, TrainConfig.desk_scale(epochs=args.epochs, seed=args.seed), progress=progress)
show("trained", model)
save_checkpoint(model, out / "model")
print(f"checkpoint and curves in {out}/")
