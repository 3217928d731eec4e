"""Decomposition metrics: modal/amodal IOU after Hungarian matching, pairwise
depth-ordering accuracy (DPA) and reconstruction MSE."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .compositor import SEGMENT_THRESHOLD, amodal_masks, modal_masks

DPA_THRESHOLDS = tuple(range(0, 100, 10))
DEFAULT_MIN_OVERLAP = 30


def iou(mask_a, mask_b) -> float:
    """Intersection over union; 1 when both masks are empty."""
    a = np.asarray(mask_a, dtype=bool)
    b = np.asarray(mask_b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"iou: shape mismatch {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def iou_matrix(gt_masks, pred_masks) -> np.ndarray:
    return np.array([[iou(g, p) for p in pred_masks] for g in gt_masks], dtype=np.float64).reshape(
        len(gt_masks), len(pred_masks))


def _best_total(scores: np.ndarray) -> float:
    if scores.size == 0:
        return 0.0
    rows, cols = linear_sum_assignment(scores, maximize=True)
    return float(scores[rows, cols].sum())


def assign_max(scores: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Maximum-cardinality, maximum-total assignment; ``out[i]`` is a column or -1.

    Among optimal assignments the lexicographically smallest is returned: row 0
    takes the lowest column that still allows the optimum, then row 1, and so on.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n_rows, n_cols = scores.shape
    out = np.full(n_rows, -1, dtype=np.int64)
    target = _best_total(scores)
    slack = tol * max(1.0, abs(target))
    pairs_needed = min(n_rows, n_cols)
    rows, cols = list(range(n_rows)), list(range(n_cols))
    fixed, pairs = 0.0, 0
    while rows:
        i = rows.pop(0)
        for c in cols + [-1]:
            rest_cols = [k for k in cols if k != c]
            new_pairs = pairs + (c >= 0)
            if new_pairs + min(len(rows), len(rest_cols)) < pairs_needed:
                continue
            gain = scores[i, c] if c >= 0 else 0.0
            total = fixed + gain + _best_total(scores[np.ix_(rows, rest_cols)])
            if total >= target - slack:
                out[i] = c
                cols, fixed, pairs = rest_cols, fixed + gain, new_pairs
                break
    return out


def hungarian_match(gt_masks, pred_masks) -> np.ndarray:
    """Assignment maximising total modal IOU; ``out[i]`` is the predicted index or -1.

    Every ground-truth object is matched while predictions remain, so the
    matching is a maximum-cardinality one with ties broken by lowest index pair.
    """
    return assign_max(iou_matrix(gt_masks, pred_masks))


def mse(x, reconstruction) -> float:
    x = np.asarray(x, dtype=np.float64)
    r = np.asarray(reconstruction, dtype=np.float64)
    if x.shape != r.shape:
        raise ValueError(f"mse: shape mismatch {x.shape} vs {r.shape}")
    return float(np.mean((x - r) ** 2))


@dataclass
class PredictedScene:
    """Predicted per-object masks ``[J, N, N]``, depths ``[J]`` and reconstruction ``[3, N, N]``."""

    modal: np.ndarray
    amodal: np.ndarray
    depths: np.ndarray
    reconstruction: np.ndarray | None = None

    @classmethod
    def from_alphas(cls, placed_alphas, depths, reconstruction=None,
                    threshold: float = SEGMENT_THRESHOLD) -> "PredictedScene":
        """Modal masks: nearest object with alpha > threshold; amodal: alpha > threshold."""
        return cls(modal_masks(placed_alphas, depths, threshold), amodal_masks(placed_alphas, threshold),
                   np.asarray(depths, dtype=np.float64), reconstruction)

    @classmethod
    def from_ground_truth(cls, gt) -> "PredictedScene":
        return cls(gt.modal.copy(), gt.amodal.copy(), gt.depths, gt.image.copy())


@dataclass
class MatchReport:
    assignment: list[int]
    modal_iou: list[float]
    amodal_iou: list[float]
    depth_pairs: list[dict] = field(default_factory=list)
    miou: float = 0.0
    aiou: float = 0.0
    dpa: float | None = None
    mse: float | None = None
    amodal_assignment: list[int] = field(default_factory=list)

    def dpa_at(self, threshold: int) -> float | None:
        verdicts = [p["correct"] for p in self.depth_pairs if p["overlap"] >= threshold]
        return float(np.mean(verdicts)) if verdicts else None

    def to_dict(self) -> dict:
        return {"assignment": self.assignment, "amodal_assignment": self.amodal_assignment,
                "modal_iou": self.modal_iou,
                "amodal_iou": self.amodal_iou, "depth_pairs": self.depth_pairs,
                "miou": self.miou, "aiou": self.aiou, "dpa": self.dpa, "mse": self.mse}


def _matched_ious(gt_masks, pred_masks, assignment) -> list[float]:
    # unmatched ground-truth objects score 0
    return [iou(gt_masks[i], pred_masks[a]) if a >= 0 else 0.0 for i, a in enumerate(assignment)]


def depth_pairs(gt, pred: PredictedScene, assignment) -> list[dict]:
    """Every matched ground-truth pair with its amodal overlap and order verdict."""
    ranks = list(gt.depth_ranks)
    out = []
    for i in range(len(ranks)):
        for j in range(i + 1, len(ranks)):
            a, b = assignment[i], assignment[j]
            if a < 0 or b < 0:
                continue
            overlap = int(np.count_nonzero(gt.amodal[i] & gt.amodal[j]))
            gt_i_nearer = ranks[i] < ranks[j]
            di, dj = float(pred.depths[a]), float(pred.depths[b])
            correct = (di < dj) if gt_i_nearer else (dj < di)
            out.append({"pair": [i, j], "overlap": overlap, "correct": bool(correct)})
    return out


def evaluate_scene(gt, pred: PredictedScene, min_overlap: int = DEFAULT_MIN_OVERLAP) -> MatchReport:
    # each score is matched on its own masks, so neither depends on tie-breaks in the other
    assignment = hungarian_match(gt.modal, pred.modal)
    amodal_assignment = hungarian_match(gt.amodal, pred.amodal)
    m = _matched_ious(gt.modal, pred.modal, assignment)
    a = _matched_ious(gt.amodal, pred.amodal, amodal_assignment)
    report = MatchReport([int(v) for v in assignment], m, a,
                         depth_pairs(gt, pred, assignment),
                         miou=float(np.mean(m)) if m else 1.0,
                         aiou=float(np.mean(a)) if a else 1.0,
                         amodal_assignment=[int(v) for v in amodal_assignment])
    report.dpa = report.dpa_at(min_overlap)
    if pred.reconstruction is not None:
        report.mse = mse(gt.image, pred.reconstruction)
    return report


def miou(gt, pred: PredictedScene) -> float:
    return evaluate_scene(gt, pred).miou


def aiou(gt, pred: PredictedScene) -> float:
    return evaluate_scene(gt, pred).aiou


def dpa(gt, pred: PredictedScene, min_overlap_pixels: int = DEFAULT_MIN_OVERLAP) -> float | None:
    """Fraction of qualifying matched pairs with correctly predicted order; None if none qualify."""
    return evaluate_scene(gt, pred, min_overlap_pixels).dpa


def dpa_sweep(reports: Sequence[MatchReport], thresholds=DPA_THRESHOLDS) -> list[dict]:
    """Pooled DPA over all scenes for each overlap threshold."""
    rows = []
    for t in thresholds:
        verdicts = [p["correct"] for r in reports for p in r.depth_pairs if p["overlap"] >= t]
        rows.append({"threshold": int(t), "dpa": float(np.mean(verdicts)) if verdicts else None,
                     "pairs": len(verdicts)})
    return rows


def summarize(reports: Sequence[MatchReport], min_overlap: int = DEFAULT_MIN_OVERLAP) -> dict:
    verdicts = [p["correct"] for r in reports for p in r.depth_pairs if p["overlap"] >= min_overlap]
    mses = [r.mse for r in reports if r.mse is not None]
    return {"scenes": len(reports),
            "miou": float(np.mean([r.miou for r in reports])) if reports else None,
            "aiou": float(np.mean([r.aiou for r in reports])) if reports else None,
            "dpa": float(np.mean(verdicts)) if verdicts else None,
            "dpa_pairs": len(verdicts),
            "dpa_min_overlap": min_overlap,
            "mse": float(np.mean(mses)) if mses else None}


def write_report(reports: Sequence[MatchReport], json_path, csv_path=None,
                 scene_ids: Sequence | None = None, extra: dict | None = None,
                 min_overlap: int = DEFAULT_MIN_OVERLAP) -> dict:
    """Write the JSON report (summary, DPA sweep, per-scene details) and flat CSV rows."""
    ids = list(scene_ids) if scene_ids is not None else list(range(len(reports)))
    doc = {"summary": summarize(reports, min_overlap), "dpa_sweep": dpa_sweep(reports),
           "scenes": [dict(scene_id=i, **r.to_dict()) for i, r in zip(ids, reports)]}
    if extra:
        doc.update(extra)
    json_path = Path(json_path)
    json_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    csv_path = Path(csv_path) if csv_path is not None else json_path.with_suffix(".csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["scene_id", "miou", "aiou", "dpa", "mse"])
        for i, r in zip(ids, reports):
            w.writerow([i, repr(r.miou), repr(r.aiou), "" if r.dpa is None else repr(r.dpa),
                        "" if r.mse is None else repr(r.mse)])
    sweep_path = csv_path.with_name(csv_path.stem + "_dpa_sweep.csv")
    with open(sweep_path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["threshold", "dpa", "pairs"])
        for row in doc["dpa_sweep"]:
            w.writerow([row["threshold"], "" if row["dpa"] is None else repr(row["dpa"]), row["pairs"]])
    return doc


__all__ = [
    "DPA_THRESHOLDS", "MatchReport", "PredictedScene", "aiou", "depth_pairs", "dpa", "dpa_sweep",
    "evaluate_scene", "hungarian_match", "iou", "iou_matrix", "miou", "mse", "summarize",
    "write_report",
]
