import hashlib
import json
import subprocess
import sys
from pathlib import Path

import pytest

from zoomdesc.cli import main, substream


def _tree_digest(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "toy.toml").write_text("[toy]\nn_categories = 2\nshapes_per_category = 3\npoints_per_shape = 8\n"
                                   "side = 128\n")
    assert main(["gen", "--config", str(root / "toy.toml"), "--out", str(root / "corpus")]) == 0
    assert main(["train", "--corpus", str(root / "corpus"), "--epochs", "2", "--seed", "7", "--group-size", "48",
                 "--out", str(root / "run1")]) == 0
    return root


def test_gen_layout(work):
    c = work / "corpus"
    assert (c / "manifest.jsonl").exists() and len(list((c / "images").glob("*.png"))) == 18
    man = json.loads((c / "run_manifest.json").read_text())
    assert man["subcommand"] == "gen" and man["seed"] == 0 and len(man["config_hash"]) == 16


def test_train_replay_is_byte_identical(work):
    assert main(["train", "--corpus", str(work / "corpus"), "--epochs", "2", "--seed", "7", "--group-size", "48",
                 "--out", str(work / "run2")]) == 0
    assert (work / "run1" / "history.csv").read_bytes() == (work / "run2" / "history.csv").read_bytes()
    assert _tree_digest(work / "run1" / "model") == _tree_digest(work / "run2" / "model")


def test_eval_schema_and_replay(work):
    args = ["eval", "--corpus", str(work / "corpus"), "--model", str(work / "run1" / "model"), "--top-k", "5"]
    assert main(args + ["--out", str(work / "ev1"), "--plot"]) == 0
    assert main(args + ["--out", str(work / "ev2"), "--plot"]) == 0
    rep = json.loads((work / "ev1" / "report.json").read_text())
    assert {"cmc_at_5", "cacc_at_5pct", "cmc_curve", "cacc_curve", "config_hash"} <= set(rep)
    for name in ("report.json", "pairs.csv"):
        assert (work / "ev1" / name).read_bytes() == (work / "ev2" / name).read_bytes()
    assert (work / "ev1" / "curves.png").exists()


def test_manifest_replay(work):
    man = json.loads((work / "ev1" / "run_manifest.json").read_text())
    argv = list(man["argv"])
    argv[argv.index("--out") + 1] = str(work / "ev3")
    assert main(argv) == 0
    assert (work / "ev3" / "report.json").read_bytes() == (work / "ev1" / "report.json").read_bytes()


def test_app_subcommands(work):
    corpus, model = str(work / "corpus"), str(work / "run1" / "model")
    ids = sorted(p.stem for p in (work / "corpus" / "images").glob("*.png"))
    before = _tree_digest(work / "corpus")
    assert main(["embed", "--corpus", corpus, "--model", model, "--sketch", ids[0], "--out", str(work / "emb")]) == 0
    assert (work / "emb" / f"{ids[0]}.npz").exists()
    for extra in ([], ["--ranked"], ["--hungarian"]):
        assert main(["match", "--corpus", corpus, "--model", model, "--a", ids[0], "--b", ids[1], *extra,
                     "--out", str(work / "match")]) == 0
        first = json.loads((work / "match" / "matches.jsonl").read_text().splitlines()[0])
        assert {"src", "tgt", "dist"} <= set(first)
    assert main(["perturb-bench", "--corpus", corpus, "--model", model, "--rotations", "0,90",
                 "--out", str(work / "pb")]) == 0
    assert len(json.loads((work / "pb" / "grid.json").read_text())) == 2
    assert main(["morph", "--corpus", corpus, "--model", model, "--a", ids[0], "--b", ids[3], "--steps", "4",
                 "--gif", "--out", str(work / "morph")]) == 0
    assert len(list((work / "morph" / "frames").glob("frame_*.png"))) == 5
    assert "triangles" in json.loads((work / "morph" / "morph.json").read_text())
    assert main(["segment", "--corpus", corpus, "--model", model, "--train-sketch", ids[0], "--train-sketch",
                 ids[1], "--sketch", ids[2], "--n-samples", "40", "--out", str(work / "seg")]) == 0
    lines = (work / "seg" / "segmentation.jsonl").read_text().splitlines()
    assert lines and {"x", "y", "label"} <= set(json.loads(lines[0]))
    assert main(["retrieve", "--corpus", corpus, "--model", model, "--query-sketch", ids[0], "--query-points",
                 "200", "--top-k", "3", "--out", str(work / "ret")]) == 0
    rank = json.loads((work / "ret" / "ranking.json").read_text())
    assert len(rank["ranking"]) == 3 and rank["view"]
    assert _tree_digest(work / "corpus") == before


def test_usage_error_exit_2(work):
    with pytest.raises(SystemExit) as exc:
        main(["eval", "--no-such-flag"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_validation_error_exit_1(work, capsys):
    rc = main(["eval", "--corpus", str(work / "corpus"), "--model", str(work / "nope"), "--out", str(work / "bad")])
    assert rc == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "FileNotFoundError" and err["subcommand"] == "eval"
    rc = main(["match", "--corpus", str(work / "corpus"), "--model", str(work / "run1" / "model"), "--a", "x",
               "--b", "y", "--out", str(work / "bad")])
    assert rc == 1


def test_substreams_differ():
    assert substream(0, "train") != substream(0, "eval")
    assert substream(0, "train") == substream(0, "train") != substream(1, "train")


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "zoomdesc.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.strip()
