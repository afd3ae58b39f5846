"""Command-line entry point: ``zoomdesc <subcommand> ...``.

Every run writes ``run_manifest.json`` into its ``--out`` directory with the
argv, the resolved configuration, its hash and the master seed, so a run can
be replayed from the manifest alone.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import zlib
from dataclasses import asdict, is_dataclass
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("zoomdesc")


def substream(seed: int, name: str) -> int:
    """Independent integer seed for a named component, derived from the master seed."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def _jsonable(obj):
    if is_dataclass(obj):
        return _jsonable(asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(_jsonable(cfg), sort_keys=True).encode()).hexdigest()[:16]


def write_manifest(out: Path, args, config: dict, inputs: dict, outputs: list) -> None:
    argv = [a for a in (args._argv or [])]
    manifest = {"argv": argv, "subcommand": args.command, "seed": args.seed, "version": __version__,
                "config": _jsonable(config), "config_hash": config_hash(config),
                "inputs": _jsonable(inputs), "outputs": sorted(outputs)}
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_model(path):
    from .embedder import load_checkpoint

    if not Path(path, "metadata.json").exists():
        raise FileNotFoundError(f"no checkpoint at {path} (metadata.json missing)")
    return load_checkpoint(path)


def _load_corpus(path):
    from .dataset.corpus import load_corpus

    return load_corpus(path)


def _split(corpus, holdout: int, part: str):
    if not holdout:
        return corpus
    from .dataset.toy import shape_split

    train, test = shape_split(corpus, holdout)
    return train if part == "train" else test


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


# subcommands -------------------------------------------------------------

def cmd_gen(args) -> dict:
    from .dataset.toy import ToyConfig, write_toy_corpus

    cfg = ToyConfig.from_toml(args.config) if args.config else ToyConfig()
    for name in ("n_categories", "shapes_per_category", "points_per_shape", "side"):
        v = getattr(args, name)
        if v is not None:
            setattr(cfg, name, v)
    cfg = ToyConfig(**asdict(cfg))
    out = _out_dir(args)
    write_toy_corpus(cfg, out, seed=substream(args.seed, "toy"))
    return {"config": {"toy": asdict(cfg)}, "inputs": {"config": args.config}, "outputs": ["manifest.jsonl", "images/"]}


def cmd_train(args) -> dict:
    import torch

    from .canvas import AugmentConfig
    from .embedder import build_model, save_checkpoint
    from .training import TrainConfig, train

    corpus = _split(_load_corpus(args.corpus), args.holdout, "train")
    over = {"epochs": args.epochs, "lr": args.lr, "loss": args.loss, "batch_size": args.batch_size,
            "group_size": args.group_size}
    over = {k: v for k, v in over.items() if v is not None}
    if args.config:
        cfg = TrainConfig.from_toml(args.config, **over)
    else:
        cfg = TrainConfig.desk_scale(**over) if args.desk_scale else TrainConfig(**over)
    if args.no_rotation:
        aug = asdict(cfg.augment)
        aug["rotation_range"] = (0.0, 0.0)
        cfg.augment = AugmentConfig(**aug)
    cfg.seed = substream(args.seed, "train")
    out = _out_dir(args)
    cfg.checkpoint_dir = str(out / "checkpoints") if cfg.checkpoint_every else None
    torch.manual_seed(substream(args.seed, "init"))
    model = build_model(args.backbone, d=args.d, crop_size=args.crop_size, width=args.width)
    model, history = train(corpus, model, cfg)
    save_checkpoint(model, out / "model", extra={"train": _jsonable(cfg)})
    history.write_csv(out / "history.csv")
    model_cfg = {"backbone": args.backbone, "d": args.d, "crop_size": args.crop_size, "width": args.width}
    return {"config": {"train": asdict(cfg), "model": model_cfg, "holdout": args.holdout},
            "inputs": {"corpus": args.corpus}, "outputs": ["model/", "history.csv"]}


def cmd_embed(args) -> dict:
    from .matching import build_index, save_index

    corpus = _load_corpus(args.corpus)
    model = _load_model(args.model)
    out = _out_dir(args)
    ids = args.sketch or sorted(corpus.records)
    for sid in ids:
        rec = corpus.records[sid]
        save_index(build_index(model, corpus.image(sid), rec.points, sid), out / f"{sid}.npz")
    return {"config": {"sketches": ids}, "inputs": {"corpus": args.corpus, "model": args.model},
            "outputs": [f"{s}.npz" for s in ids]}


def cmd_match(args) -> dict:
    from .matching import build_index, match_hungarian, match_nn, write_matches_jsonl

    corpus = _load_corpus(args.corpus)
    model = _load_model(args.model)
    for sid in (args.a, args.b):
        if sid not in corpus.records:
            raise KeyError(f"unknown sketch {sid!r}")
    ia = build_index(model, corpus.image(args.a), corpus.records[args.a].points, args.a)
    ib = build_index(model, corpus.image(args.b), corpus.records[args.b].points, args.b)
    out = _out_dir(args)
    if args.hungarian:
        asg = match_hungarian(ia, ib)
        with open(out / "matches.jsonl", "w", encoding="utf-8", newline="\n") as fh:
            for s, t, d in asg.pairs:
                fh.write(json.dumps({"src": s, "tgt": t, "dist": d}) + "\n")
    else:
        write_matches_jsonl(match_nn(ia, ib, ranked=args.ranked), out / "matches.jsonl", with_rank=args.ranked)
    return {"config": {"a": args.a, "b": args.b, "hungarian": args.hungarian, "ranked": args.ranked},
            "inputs": {"corpus": args.corpus, "model": args.model}, "outputs": ["matches.jsonl"]}


def _bench_cfg(args, rot=None, zoom=None):
    from .evaluation import BenchmarkConfig

    return BenchmarkConfig(top_k=args.top_k, cacc_threshold=args.cacc_threshold,
                           pre_rotate_deg=args.pre_rotate_deg if rot is None else rot,
                           max_zoom=args.max_zoom if zoom is None else zoom, seed=substream(args.seed, "eval"))


def cmd_eval(args) -> dict:
    from .evaluation import plot_report, run_benchmark

    corpus = _split(_load_corpus(args.corpus), args.holdout, "test")
    model = _load_model(args.model)
    cfg = _bench_cfg(args)
    report = run_benchmark(corpus, model, cfg)
    out = _out_dir(args)
    report.write(out / "report.json")
    report.write_pairs_csv(out / "pairs.csv")
    outputs = ["report.json", "pairs.csv"]
    if args.plot:
        plot_report(report, out / "curves.png", label=Path(args.model).name)
        outputs.append("curves.png")
    return {"config": {"benchmark": asdict(cfg), "holdout": args.holdout},
            "inputs": {"corpus": args.corpus, "model": args.model}, "outputs": outputs}


def cmd_perturb_bench(args) -> dict:
    import csv

    from .evaluation import run_benchmark

    corpus = _split(_load_corpus(args.corpus), args.holdout, "test")
    rots, zooms = _floats(args.rotations), _floats(args.zooms)
    out = _out_dir(args)
    rows = []
    for mpath in args.model:
        model = _load_model(mpath)
        for z in zooms:
            for r in rots:
                rep = run_benchmark(corpus, model, _bench_cfg(args, rot=r, zoom=z))
                rows.append({"model": str(mpath), "rotation": r, "zoom": z, "cmc_at_k": rep.cmc_at_k,
                             "cacc_at_t": rep.cacc_at_t, "n_points": rep.n_points})
    with open(out / "grid.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "rotation", "zoom", "cmc_at_k", "cacc_at_t", "n_points"])
        for row in rows:
            w.writerow([row["model"], repr(row["rotation"]), repr(row["zoom"]), repr(row["cmc_at_k"]),
                        repr(row["cacc_at_t"]), row["n_points"]])
    (out / "grid.json").write_text(json.dumps(rows, indent=1, sort_keys=True) + "\n")
    return {"config": {"rotations": rots, "zooms": zooms, "top_k": args.top_k,
                       "cacc_threshold": args.cacc_threshold, "holdout": args.holdout},
            "inputs": {"corpus": args.corpus, "model": [str(m) for m in args.model]},
            "outputs": ["grid.csv", "grid.json"]}


def _image_arg(corpus_path, sketch, png):
    from .canvas import load_png

    if png:
        return load_png(png)
    if corpus_path is None or sketch is None:
        raise ValueError("give either a PNG path or --corpus together with a sketch id")
    return _load_corpus(corpus_path).image(sketch)


def cmd_morph(args) -> dict:
    from .apps.morph import MorphConfig, morph
    from .canvas import save_png

    a = _image_arg(args.corpus, args.a, args.image_a)
    b = _image_arg(args.corpus, args.b, args.image_b)
    model = _load_model(args.model)
    cfg = MorphConfig(k=args.k, steps=args.steps)
    res = morph(a, b, model, cfg, rng=substream(args.seed, "morph"))
    out = _out_dir(args)
    frames = out / "frames"
    frames.mkdir(exist_ok=True)
    names = []
    for s, fr in enumerate(res.frames):
        save_png(fr, frames / f"frame_{s:03d}.png")
        names.append(f"frames/frame_{s:03d}.png")
    (out / "morph.json").write_text(json.dumps(res.sidecar(), indent=1, sort_keys=True) + "\n")
    outputs = names + ["morph.json"]
    if args.gif:
        from PIL import Image

        ims = [Image.fromarray(np.clip(np.rint(f.pixels * 255), 0, 255).astype(np.uint8)) for f in res.frames]
        ims[0].save(out / "morph.gif", save_all=True, append_images=ims[1:], duration=60, loop=0)
        outputs.append("morph.gif")
    return {"config": {"morph": asdict(cfg), "a": args.a or args.image_a, "b": args.b or args.image_b},
            "inputs": {"corpus": args.corpus, "model": args.model}, "outputs": outputs}


def cmd_segment(args) -> dict:
    from .apps.segment import (labelled_descriptors, save_overlay, segment, train_segmenter,
                               write_segmentation_jsonl)

    corpus = _load_corpus(args.corpus)
    model = _load_model(args.model)
    train_ids = args.train_sketch
    missing = [s for s in train_ids + [args.sketch] if s not in corpus.records]
    if missing:
        raise KeyError(f"unknown sketches {missing}")
    seg = train_segmenter(labelled_descriptors(corpus, model, train_ids), C=args.C, kernel=args.kernel)
    image = corpus.image(args.sketch)
    result = segment(image, model, seg, args.n_samples, np.random.default_rng(substream(args.seed, "segment")))
    out = _out_dir(args)
    seg.save(out / "segmenter.json")
    write_segmentation_jsonl(result, out / "segmentation.jsonl")
    save_overlay(image, result, seg.labels, out / "overlay.png")
    return {"config": {"C": args.C, "kernel": args.kernel, "train": train_ids, "sketch": args.sketch,
                       "n_samples": args.n_samples},
            "inputs": {"corpus": args.corpus, "model": args.model},
            "outputs": ["segmenter.json", "segmentation.jsonl", "overlay.png"]}


def cmd_retrieve(args) -> dict:
    from .apps.retrieval import build_retrieval_index, retrieve

    corpus = _load_corpus(args.corpus)
    model = _load_model(args.model)
    query = _image_arg(args.corpus, args.query_sketch, args.query)
    index = build_retrieval_index(corpus, model, args.points_per_model, rng=substream(args.seed, "bank"))
    res = retrieve(query, model, index, top_k=args.top_k, rng=substream(args.seed, "query"),
                   n_query=args.query_points)
    out = _out_dir(args)
    (out / "ranking.json").write_text(res.to_json())
    return {"config": {"top_k": args.top_k, "points_per_model": args.points_per_model,
                       "query_points": args.query_points, "query": args.query or args.query_sketch},
            "inputs": {"corpus": args.corpus, "model": args.model}, "outputs": ["ranking.json"]}


# parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master seed for every stochastic component")
    common.add_argument("--out", default="out", help="directory receiving every artifact")
    common.add_argument("--jobs", type=int, default=1, help="torch intra-op threads")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="zoomdesc", description="multi-zoom local sketch descriptors")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="write a procedural toy corpus")
    g.add_argument("--config", help="TOML file with a [toy] table")
    g.add_argument("--n-categories", dest="n_categories", type=int)
    g.add_argument("--shapes-per-category", dest="shapes_per_category", type=int)
    g.add_argument("--points-per-shape", dest="points_per_shape", type=int)
    g.add_argument("--side", type=int)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", parents=[common], help="train an embedder")
    t.add_argument("--corpus", required=True)
    t.add_argument("--config", help="TOML file with a [train] table")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--loss", choices=("triplet", "contrastive"))
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--group-size", dest="group_size", type=int)
    t.add_argument("--full-scale", dest="desk_scale", action="store_false",
                   help="use the full-length schedule instead of the desk-scale one")
    t.add_argument("--no-rotation", action="store_true", help="disable rotation augmentation")
    t.add_argument("--backbone", default="alexnet")
    t.add_argument("--d", type=int, default=128)
    t.add_argument("--crop-size", dest="crop_size", type=int, default=64)
    t.add_argument("--width", type=float, default=0.25)
    t.add_argument("--holdout", type=int, default=0, help="shapes per category withheld from training")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("embed", parents=[common], help="embed annotated points of every sketch")
    e.add_argument("--corpus", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--sketch", action="append", help="restrict to these sketch ids")
    e.set_defaults(func=cmd_embed)

    m = sub.add_parser("match", parents=[common], help="match annotated points of two sketches")
    m.add_argument("--corpus", required=True)
    m.add_argument("--model", required=True)
    m.add_argument("--a", required=True)
    m.add_argument("--b", required=True)
    m.add_argument("--ranked", action="store_true")
    m.add_argument("--hungarian", action="store_true", help="one-to-one refinement")
    m.set_defaults(func=cmd_match)

    def bench_flags(q):
        q.add_argument("--corpus", required=True)
        q.add_argument("--top-k", dest="top_k", type=int, default=5)
        q.add_argument("--cacc-threshold", dest="cacc_threshold", type=float, default=0.05)
        q.add_argument("--pre-rotate-deg", dest="pre_rotate_deg", type=float, default=90.0)
        q.add_argument("--max-zoom", dest="max_zoom", type=float, default=0.0)
        q.add_argument("--holdout", type=int, default=0, help="evaluate only the held-out shapes")

    ev = sub.add_parser("eval", parents=[common], help="CMC / CAcc benchmark")
    bench_flags(ev)
    ev.add_argument("--model", required=True)
    ev.add_argument("--plot", action="store_true")
    ev.set_defaults(func=cmd_eval)

    pb = sub.add_parser("perturb-bench", parents=[common], help="benchmark grid over perturbation sizes")
    bench_flags(pb)
    pb.add_argument("--model", required=True, action="append")
    pb.add_argument("--rotations", default="0,30,60,90")
    pb.add_argument("--zooms", default="0")
    pb.set_defaults(func=cmd_perturb_bench)

    mo = sub.add_parser("morph", parents=[common], help="morph between two sketches")
    mo.add_argument("--model", required=True)
    mo.add_argument("--corpus")
    mo.add_argument("--a")
    mo.add_argument("--b")
    mo.add_argument("--image-a", dest="image_a")
    mo.add_argument("--image-b", dest="image_b")
    mo.add_argument("--k", type=int, default=10)
    mo.add_argument("--steps", type=int, default=50)
    mo.add_argument("--gif", action="store_true")
    mo.set_defaults(func=cmd_morph)

    se = sub.add_parser("segment", parents=[common], help="SVM part labels from descriptors")
    se.add_argument("--corpus", required=True)
    se.add_argument("--model", required=True)
    se.add_argument("--train-sketch", dest="train_sketch", action="append", required=True)
    se.add_argument("--sketch", required=True)
    se.add_argument("--n-samples", dest="n_samples", type=int, default=200)
    se.add_argument("--C", type=float, default=1.0)
    se.add_argument("--kernel", choices=("rbf", "linear"), default="rbf")
    se.set_defaults(func=cmd_segment)

    r = sub.add_parser("retrieve", parents=[common], help="rank corpus models for a query sketch")
    r.add_argument("--corpus", required=True)
    r.add_argument("--model", required=True)
    r.add_argument("--query", help="query PNG")
    r.add_argument("--query-sketch", dest="query_sketch", help="query by corpus sketch id")
    r.add_argument("--top-k", dest="top_k", type=int, default=10)
    r.add_argument("--points-per-model", dest="points_per_model", type=int, default=70)
    r.add_argument("--query-points", dest="query_points", type=int, default=1000)
    r.set_defaults(func=cmd_retrieve)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)  # usage errors exit with status 2
    args._argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        import torch

        torch.set_num_threads(max(1, args.jobs))
        info = args.func(args)
        write_manifest(Path(args.out), args, info["config"], info["inputs"], info["outputs"])
    except (ValueError, KeyError, RuntimeError, FileNotFoundError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
        print(json.dumps({"error": type(exc).__name__, "message": str(msg), "subcommand": args.command}),
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
