import csv
import itertools
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from layerscene.metrics import (DPA_THRESHOLDS, PredictedScene, aiou, assign_max, dpa, dpa_sweep,
                                evaluate_scene, hungarian_match, iou, iou_matrix, miou, mse,
                                summarize, write_report)
from layerscene.scenegen import ObjectSpec, SceneSpec, render, sample_polygon_scene

from .oracles import brute_force_max_total, count_iou


def rect(N, r0, r1, c0, c1):
    m = np.zeros((N, N), dtype=bool)
    m[r0:r1, c0:c1] = True
    return m


def square(cx, cy, half, color):
    return ObjectSpec("square", (cx, cy), half * np.sqrt(2), np.pi / 4, color)


# ---------------------------------------------------------------------- IOU
def test_iou_examples():
    a = rect(6, 0, 2, 0, 3)
    b = rect(6, 0, 2, 1, 4)
    assert iou(a, a) == 1.0
    assert iou(a, rect(6, 4, 6, 4, 6)) == 0.0
    assert iou(a, b) == 4 / 8
    assert iou(np.zeros((3, 3), bool), np.zeros((3, 3), bool)) == 1.0
    assert iou(a, np.zeros((6, 6), bool)) == 0.0


def test_iou_shape_mismatch():
    with pytest.raises(ValueError):
        iou(np.zeros((3, 3), bool), np.zeros((3, 4), bool))


@given(st.integers(0, 2**31 - 1))
def test_iou_symmetric_bounded_and_matches_counting(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(2, 5, 5)) > rng.uniform(0, 1, size=2)[:, None, None]
    v = iou(a, b)
    assert v == iou(b, a) and 0 <= v <= 1
    assert v == pytest.approx(count_iou(a, b), abs=1e-15)


# ------------------------------------------------------------------ matching
def test_identity_and_single_pair_matching():
    sc = render(sample_polygon_scene(3))
    assert hungarian_match(sc.modal, sc.modal).tolist() == [0, 1]
    assert hungarian_match(rect(4, 0, 1, 0, 1)[None], rect(4, 3, 4, 3, 4)[None]).tolist() == [0]


def test_matching_total_equals_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(500):
        s = rng.uniform(size=(4, 4))
        a = assign_max(s)
        assert sorted(a.tolist()) == [0, 1, 2, 3]
        assert abs(s[np.arange(4), a].sum() - brute_force_max_total(s)) < 1e-12


@given(st.integers(0, 2**31 - 1), st.integers(1, 5), st.integers(1, 5))
def test_matching_rectangular_is_injective_and_optimal(seed, n, m):
    rng = np.random.default_rng(seed)
    s = np.round(rng.uniform(size=(n, m)), 1)  # rounding forces ties
    a = assign_max(s)
    used = [c for c in a if c >= 0]
    assert len(used) == len(set(used)) == min(n, m)
    total = sum(s[i, c] for i, c in enumerate(a) if c >= 0)
    assert abs(total - brute_force_max_total(s)) < 1e-9


def test_matching_ties_take_lowest_index_pairs():
    assert assign_max(np.zeros((3, 3))).tolist() == [0, 1, 2]
    assert assign_max(np.ones((2, 3))).tolist() == [0, 1]
    assert assign_max(np.ones((3, 2))).tolist() == [0, 1, -1]


def test_matching_tie_break_is_lexicographic_among_optima():
    rng = np.random.default_rng(5)
    for _ in range(200):
        s = rng.integers(0, 3, size=(3, 3)).astype(float)
        best = brute_force_max_total(s)
        optima = [p for p in itertools.permutations(range(3))
                  if abs(sum(s[i, p[i]] for i in range(3)) - best) < 1e-12]
        assert tuple(assign_max(s).tolist()) == min(optima)


# ----------------------------------------------------------------------- MSE
def test_mse_examples(rng):
    x = rng.uniform(size=(3, 4, 4))
    assert mse(x, x) == 0
    assert mse(np.zeros((3, 2, 2)), np.ones((3, 2, 2))) == 1
    y = rng.uniform(size=(3, 4, 4))
    direct = sum((a - b) ** 2 for a, b in zip(x.ravel(), y.ravel())) / x.size
    assert abs(mse(x, y) - direct) < 1e-12
    with pytest.raises(ValueError):
        mse(x, y[:2])


# ----------------------------------------------------------------- mIOU/aIOU
def test_perfect_and_empty_predictions():
    sc = render(sample_polygon_scene(1))
    perfect = PredictedScene.from_ground_truth(sc)
    assert miou(sc, perfect) == 1.0 and aiou(sc, perfect) == 1.0
    empty = np.zeros_like(sc.modal)
    nothing = PredictedScene(empty, empty, np.array([0.3, 0.6]))
    assert miou(sc, nothing) == 0.0 and aiou(sc, nothing) == 0.0


def counting_miou(gt_masks, pred_masks):
    """Brute-force the matching and count pixels for every IOU."""
    n, m = len(gt_masks), len(pred_masks)
    best, best_vals = -1.0, None
    for perm in itertools.permutations(range(m), min(n, m)):
        vals = [count_iou(gt_masks[i], pred_masks[perm[i]]) if i < len(perm) else 0.0 for i in range(n)]
        if sum(vals) > best + 1e-12:
            best, best_vals = sum(vals), vals
    return sum(best_vals) / n


def test_three_object_scene_with_occlusion_matches_counting_oracle():
    spec = SceneSpec([square(6, 6, 3, (1, 0, 0)), square(9, 9, 3, (0, 1, 0)),
                      square(20, 20, 4, (0, 0, 1))], [0, 1, 2], 32)
    gt = render(spec)
    assert gt.modal[0].sum() < gt.amodal[0].sum()  # object 0 is occluded
    amodal = np.stack([rect(32, 3, 9, 2, 9), rect(32, 16, 24, 16, 24), rect(32, 6, 13, 6, 12)])
    depths = np.array([0.7, 0.2, 0.4])
    pred = PredictedScene.from_alphas(amodal.astype(float), depths)
    rep = evaluate_scene(gt, pred)
    assert rep.miou == pytest.approx(counting_miou(gt.modal, pred.modal), abs=1e-12)
    assert rep.assignment == [0, 2, 1]
    assert rep.aiou == pytest.approx(counting_miou(gt.amodal, pred.amodal), abs=1e-12)


@given(st.integers(0, 2**31 - 1))
def test_scores_invariant_under_prediction_permutation(seed):
    rng = np.random.default_rng(seed)
    gt = render(sample_polygon_scene(seed))
    alphas = rng.uniform(size=(3, 64, 64)) * gt.amodal.any(0)
    depths = rng.uniform(size=3)
    p = rng.permutation(3)
    a = evaluate_scene(gt, PredictedScene.from_alphas(alphas, depths))
    b = evaluate_scene(gt, PredictedScene.from_alphas(alphas[p], depths[p]))
    assert a.miou == pytest.approx(b.miou, abs=1e-12) and a.aiou == pytest.approx(b.aiou, abs=1e-12)


def test_unmatched_ground_truth_scores_zero():
    gt = render(sample_polygon_scene(2))
    pred = PredictedScene(gt.modal[:1], gt.amodal[:1], np.array([0.5]))
    rep = evaluate_scene(gt, pred)
    assert sorted(rep.modal_iou) == [0.0, 1.0] and rep.miou == 0.5


# ---------------------------------------------------------------------- DPA
def two_overlapping(overlap_cols):
    """Two 5-row squares whose intersection is 5 x ``overlap_cols`` pixels."""
    spec = SceneSpec([square(10, 10, 5, (1, 0, 0)), square(20 - overlap_cols, 10, 5, (0, 1, 0))],
                     [0, 1], 32)
    return render(spec)


def test_dpa_correct_order_and_excluded_pair():
    gt = two_overlapping(5)  # overlap 10 x 5 = 50 pixels
    assert (gt.amodal[0] & gt.amodal[1]).sum() == 50
    pred = PredictedScene(gt.modal, gt.amodal, np.array([0.7, 0.3]))
    assert dpa(gt, pred) == 1.0
    assert dpa(gt, PredictedScene(gt.modal, gt.amodal, np.array([0.3, 0.7]))) == 0.0
    small = two_overlapping(1)
    assert (small.amodal[0] & small.amodal[1]).sum() == 10
    assert dpa(small, PredictedScene.from_ground_truth(small)) is None


def test_dpa_ties_are_incorrect():
    gt = two_overlapping(5)
    assert dpa(gt, PredictedScene(gt.modal, gt.amodal, np.array([0.5, 0.5]))) == 0.0


def test_ground_truth_depths_give_perfect_dpa_at_every_threshold():
    reports = [evaluate_scene(sc, PredictedScene.from_ground_truth(sc))
               for sc in (render(sample_polygon_scene([7, i])) for i in range(100))]
    for row in dpa_sweep(reports):
        assert row["dpa"] in (1.0, None)
    assert dpa_sweep(reports)[0]["pairs"] == 100


def test_sweep_thresholds_and_summary():
    assert DPA_THRESHOLDS == (0, 10, 20, 30, 40, 50, 60, 70, 80, 90)
    gt = two_overlapping(5)
    rep = evaluate_scene(gt, PredictedScene(gt.modal, gt.amodal, np.array([0.3, 0.7]), gt.image))
    rows = dpa_sweep([rep])
    assert [r["pairs"] for r in rows] == [1, 1, 1, 1, 1, 1, 0, 0, 0, 0]
    s = summarize([rep])
    assert s["dpa"] == 0.0 and s["mse"] == 0.0 and s["scenes"] == 1 and s["dpa_min_overlap"] == 30


def test_write_report_files(tmp_path):
    gt = two_overlapping(5)
    rep = evaluate_scene(gt, PredictedScene.from_ground_truth(gt))
    doc = write_report([rep, rep], tmp_path / "r.json", scene_ids=[4, 9], extra={"note": "x"})
    on_disk = json.loads((tmp_path / "r.json").read_text())
    assert on_disk == json.loads(json.dumps(doc)) and on_disk["note"] == "x"
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert [r["scene_id"] for r in rows] == ["4", "9"] and float(rows[0]["miou"]) == 1.0
    sweep = list(csv.DictReader(open(tmp_path / "r_dpa_sweep.csv")))
    assert len(sweep) == 10 and sweep[-1]["dpa"] == ""


def test_iou_matrix_shape():
    a = np.zeros((2, 4, 4), bool)
    b = np.zeros((3, 4, 4), bool)
    assert iou_matrix(a, b).shape == (2, 3)
