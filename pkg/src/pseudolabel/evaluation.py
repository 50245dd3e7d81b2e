"""COCO-style average precision for single-class boxes and masks."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .geometry import Instance, box_iou, mask_iou

# written as literals so that e.g. 0.6 compares exactly against an IoU of 0.6
IOU_THRESHOLDS = tuple(round(0.50 + 0.05 * k, 2) for k in range(10))
RECALL_GRID = np.linspace(0.0, 1.0, 101)


class EvaluationError(ValueError):
    pass


def _sort_key(inst: Instance):
    return (-inst.score, inst.box.as_tuple())


def instance_iou(a: Instance, b: Instance, iou_kind: str = "box") -> float:
    if iou_kind == "box":
        return box_iou(a.box, b.box)
    if iou_kind == "mask":
        if a.mask is None or b.mask is None:
            raise EvaluationError("mask evaluation needs masks on both predictions and ground truth")
        try:
            return mask_iou(a.mask, b.mask)
        except ValueError:
            # an empty predicted mask overlaps nothing
            return 0.0
    raise ValueError(f"unknown iou_kind {iou_kind!r}")


def match_greedy(
    predictions: Sequence[Instance], gts: Sequence[Instance], iou_t: float, iou_kind: str = "box"
) -> list[tuple[Instance, Optional[Instance]]]:
    """Match predictions, highest score first, to the best still-unmatched GT with IoU >= ``iou_t``."""
    preds = sorted(predictions, key=_sort_key)
    taken = [False] * len(gts)
    out = []
    for p in preds:
        best, best_iou = -1, -1.0
        for g, gt in enumerate(gts):
            if taken[g]:
                continue
            iou = instance_iou(p, gt, iou_kind)
            if iou >= iou_t and iou > best_iou:
                best, best_iou = g, iou
        if best >= 0:
            taken[best] = True
            out.append((p, gts[best]))
        else:
            out.append((p, None))
    return out


def precision_recall(scores: Sequence[float], is_tp: Sequence[bool], n_gt: int) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative precision and recall down the score-sorted detection list (stable on ties)."""
    scores = np.asarray(scores, dtype=np.float64)
    tp = np.asarray(is_tp, dtype=bool)
    order = np.argsort(-scores, kind="mergesort")
    tp_cum = np.cumsum(tp[order])
    fp_cum = np.cumsum(~tp[order])
    precision = tp_cum / np.maximum(tp_cum + fp_cum, np.finfo(np.float64).eps)
    recall = tp_cum / n_gt
    return precision, recall


def interpolated_precision(precision: np.ndarray, recall: np.ndarray) -> np.ndarray:
    """Precision envelope sampled on the 101-point recall grid (0 where recall is unreachable)."""
    out = np.zeros(len(RECALL_GRID))
    if len(precision) == 0:
        return out
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    valid = idx < len(recall)
    out[valid] = envelope[idx[valid]]
    return out


def average_precision(matches: Sequence[tuple[float, bool]], n_gt: int) -> float:
    """101-point interpolated AP from ``(score, is_true_positive)`` pairs pooled over a dataset."""
    if n_gt <= 0:
        raise EvaluationError("average precision is undefined without ground truth")
    if not matches:
        return 0.0
    scores, tps = zip(*matches)
    p, r = precision_recall(scores, tps, n_gt)
    return float(np.mean(interpolated_precision(p, r)))


@dataclass(frozen=True)
class EvalResult:
    ap: float
    ap50: float
    ap75: float
    per_threshold: tuple[tuple[float, float], ...]
    pr_curves: np.ndarray  # (n_thresholds, 101) interpolated precision
    iou_kind: str = "box"
    n_images: int = 0
    n_gt: int = 0
    n_predictions: int = 0

    def to_dict(self) -> dict:
        r6 = lambda v: round(float(v), 6)  # noqa: E731
        return {
            "iou_kind": self.iou_kind,
            "ap": r6(self.ap),
            "ap50": r6(self.ap50),
            "ap75": r6(self.ap75),
            "iou_thresholds": [t for t, _ in self.per_threshold],
            "ap_per_threshold": [r6(a) for _, a in self.per_threshold],
            "n_images": self.n_images,
            "n_gt": self.n_gt,
            "n_predictions": self.n_predictions,
        }

    def write_pr_csv(self, path) -> Path:
        """One row per recall grid point, one precision column per IoU threshold."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["recall"] + [f"p@{t:.2f}" for t, _ in self.per_threshold])
            for j, r in enumerate(RECALL_GRID):
                w.writerow([f"{r:.2f}"] + [f"{self.pr_curves[i, j]:.6f}" for i in range(len(self.per_threshold))])
        return path


def evaluate(
    dataset_gt: Mapping[int, Sequence[Instance]],
    dataset_pred: Mapping[int, Sequence[Instance]],
    iou_kind: str = "box",
    max_dets: Optional[int] = None,
) -> EvalResult:
    """AP over IoU thresholds 0.50:0.05:0.95 for a single foreground class.

    Both arguments map image id to instances (prediction sets work too).
    Images missing from ``dataset_pred`` count as having no predictions;
    prediction image ids absent from ``dataset_gt`` raise. ``max_dets``
    caps detections per image (unlimited by default).
    """
    unknown = set(dataset_pred) - set(dataset_gt)
    if unknown:
        raise EvaluationError(f"predictions for unknown image ids {sorted(unknown)[:5]}")
    gts = {i: list(v) for i, v in dataset_gt.items()}
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        raise EvaluationError("dataset has no ground-truth instances")
    preds = {}
    for i in gts:
        p = sorted(dataset_pred.get(i, ()), key=_sort_key)
        preds[i] = p if max_dets is None else p[:max_dets]
    n_pred = sum(len(v) for v in preds.values())

    per_t = []
    curves = np.zeros((len(IOU_THRESHOLDS), len(RECALL_GRID)))
    for k, t in enumerate(IOU_THRESHOLDS):
        scores, tps = [], []
        for i in sorted(gts):
            for p, g in match_greedy(preds[i], gts[i], t, iou_kind):
                scores.append(p.score)
                tps.append(g is not None)
        if scores:
            prec, rec = precision_recall(scores, tps, n_gt)
            curves[k] = interpolated_precision(prec, rec)
        per_t.append((t, float(np.mean(curves[k]))))
    ap_by_t = dict(per_t)
    return EvalResult(
        ap=float(np.mean([a for _, a in per_t])),
        ap50=ap_by_t[0.5],
        ap75=ap_by_t[0.75],
        per_threshold=tuple(per_t),
        pr_curves=curves,
        iou_kind=iou_kind,
        n_images=len(gts),
        n_gt=n_gt,
        n_predictions=n_pred,
    )


def write_report(results: Mapping[str, EvalResult], path, extra: Optional[Mapping] = None) -> Path:
    """Metrics JSON keyed by evaluation kind (``box``/``mask``); byte-stable."""
    doc = {kind: r.to_dict() for kind, r in results.items()}
    if extra:
        doc.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    return path
