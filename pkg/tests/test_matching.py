import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from zoomdesc.canvas import Point2D, SketchImage
from zoomdesc.embedder import ShapeError
from zoomdesc.matching import (DescriptorIndex, Perturbation, build_index, match_hungarian, match_nn,
                               perturb_image, save_index, write_matches_jsonl)


def _idx(ids, desc):
    desc = np.asarray(desc, dtype=np.float64)
    return DescriptorIndex(list(ids), np.zeros((len(ids), 2)), desc)


def test_nn_tie_goes_to_lowest_id():
    src = _idx(["s"], [[0.0]])
    tgt = _idx(["b", "a", "c"], [[1.0], [-1.0], [1.0]])
    assert match_nn(src, tgt)[0].chosen[0] == "a"
    ranked = match_nn(src, tgt, ranked=True)[0].ranked_targets
    assert [t for t, _ in ranked] == ["a", "b", "c"]


def test_nn_empty_target():
    with pytest.raises(ValueError):
        match_nn(_idx(["s"], [[0.0]]), DescriptorIndex([], np.zeros((0, 2)), np.zeros((0, 1))))


def test_dimension_mismatch():
    with pytest.raises(ShapeError):
        match_nn(_idx(["s"], [[0.0, 1.0]]), _idx(["t"], [[0.0]]))


def test_duplicate_ids_rejected():
    with pytest.raises(ValueError):
        _idx(["a", "a"], [[0.0], [1.0]])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31))
def test_nn_equals_bruteforce(seed):
    rng = np.random.default_rng(seed)
    src = _idx([f"s{i}" for i in range(7)], rng.integers(-2, 3, size=(7, 2)))
    tids = [f"t{j}" for j in rng.permutation(9)]
    tgt = _idx(tids, rng.integers(-2, 3, size=(9, 2)))
    for r, row in zip(match_nn(src, tgt), src.descriptors):
        best = min(range(9), key=lambda j: (np.linalg.norm(row - tgt.descriptors[j]), tids[j]))
        assert r.chosen[0] == tids[best]


def test_hungarian_matches_exhaustive_100():
    rng = np.random.default_rng(0)
    perms = list(itertools.permutations(range(8)))
    for _ in range(100):
        cost_src = rng.normal(size=(8, 3))
        cost_tgt = rng.normal(size=(8, 3))
        src, tgt = _idx(range(8), cost_src), _idx(range(8), cost_tgt)
        d = np.linalg.norm(cost_src[:, None] - cost_tgt[None], axis=2)
        best = min(d[np.arange(8), list(p)].sum() for p in perms)
        asg = match_hungarian(src, tgt)
        assert asg.total_cost == pytest.approx(best, rel=0, abs=1e-12)
        assert sorted(t for _, t, _ in asg.pairs) == list(range(8))


def test_hungarian_rectangular_and_infeasible():
    src = _idx(["a", "b"], [[0.0], [5.0]])
    tgt = _idx(["x", "y", "z"], [[4.9], [0.2], [100.0]])
    asg = match_hungarian(src, tgt)
    assert {(s, t) for s, t, _ in asg.pairs} == {("a", "y"), ("b", "x")}
    with pytest.raises(ValueError):
        match_hungarian(tgt, src)


def test_perturbation_inverse_roundtrip():
    p = Perturbation(37.0, 1.2, (64.0, 64.0))
    pts = np.random.default_rng(0).uniform(0, 128, size=(10, 2))
    assert np.allclose(p.apply_inverse(p.apply(pts)), pts)
    assert np.allclose(p.apply(np.array([[64.0, 64.0]])), [[64.0, 64.0]])
    with pytest.raises(ValueError):
        Perturbation(0.0, 0.0, (0.0, 0.0))


def test_perturb_zero_is_identity():
    img = SketchImage(np.random.default_rng(0).uniform(0, 1, size=(64, 64)))
    pts = {"a": Point2D(3.0, 4.0)}
    out, opts, pert = perturb_image(img, pts, 0.0, 0.0, np.random.default_rng(0))
    assert out is img and opts == pts and pert.rotation == 0.0 and pert.scale == 1.0


def test_perturb_drops_points_leaving_frame():
    img = SketchImage.blank(64)
    pts = {"corner": Point2D(1.0, 1.0), "centre": Point2D(32.0, 32.0)}
    rng = np.random.default_rng(0)
    _, opts, pert = perturb_image(img, pts, 45.0, 0.5, rng)
    assert "centre" in opts
    moved = pert.apply(np.array([[1.0, 1.0]]))[0]
    assert ("corner" in opts) == bool(np.all((moved >= 0) & (moved < 64)))


def test_perturbed_points_follow_content():
    # a single dark pixel moves with its annotated point
    px = np.ones((64, 64), dtype=np.float32)
    px[10, 20] = 0.0
    img = SketchImage(px)
    out, pts, _ = perturb_image(img, {"p": Point2D(20.5, 10.5)}, 90.0, 0.0, np.random.default_rng(1))
    p = pts["p"]
    r, c = np.unravel_index(np.argmin(out.pixels), out.pixels.shape)
    assert abs(c + 0.5 - p.x) < 1.0 and abs(r + 0.5 - p.y) < 1.0


def test_build_index_and_io(tmp_path, small_corpus, tiny_model):
    sid = next(iter(small_corpus.records))
    rec = small_corpus.records[sid]
    idx = build_index(tiny_model, small_corpus.image(sid), rec.points, sid)
    assert idx.point_ids == list(rec.points) and idx.d == 8
    res = match_nn(idx, idx)
    assert all(r.source_point_id == r.chosen[0] for r in res)
    write_matches_jsonl(res, tmp_path / "m.jsonl")
    assert len((tmp_path / "m.jsonl").read_text().splitlines()) == len(rec.points)
    save_index(idx, tmp_path / "i.npz")
    z = np.load(tmp_path / "i.npz")
    assert np.array_equal(z["descriptors"], idx.descriptors)
    with pytest.raises(ValueError):
        build_index(tiny_model, small_corpus.image(sid), [("a", Point2D(1, 1)), ("a", Point2D(2, 2))])
