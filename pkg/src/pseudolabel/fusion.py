"""Merging multi-view predictions into pseudo-labels.

Weighted boxes fusion is the main path; NMS and Soft-NMS are kept as
baselines. Everything here is deterministic: ties are broken on box
coordinates so repeated runs produce identical output.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .geometry import BBox, BinaryMask, Instance, box_iou

LABEL_VOTES = ("majority", "score-weighted")
ALGORITHMS = ("wbf", "nms", "soft-nms")


@dataclass(frozen=True)
class FusionConfig:
    iou_threshold: float = 0.55
    score_threshold: float = 0.0
    label_vote: str = "score-weighted"
    algorithm: str = "wbf"
    soft_nms_method: str = "linear"
    soft_nms_sigma: float = 0.5
    soft_nms_min_score: float = 0.001

    def __post_init__(self) -> None:
        if not (0.0 < self.iou_threshold <= 1.0):
            raise ValueError(f"iou_threshold must be in (0, 1], got {self.iou_threshold}")
        if not (0.0 <= self.score_threshold <= 1.0):
            raise ValueError(f"score_threshold must be in [0, 1], got {self.score_threshold}")
        if self.label_vote not in LABEL_VOTES:
            raise ValueError(f"label_vote must be one of {LABEL_VOTES}")
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}")
        if self.soft_nms_method not in ("linear", "gaussian"):
            raise ValueError("soft_nms_method must be 'linear' or 'gaussian'")
        if self.soft_nms_sigma <= 0:
            raise ValueError("soft_nms_sigma must be positive")


@dataclass(frozen=True)
class FusedCluster:
    members: tuple[Instance, ...]
    fused: Instance

    @property
    def views(self) -> tuple[Optional[str], ...]:
        return tuple(m.view for m in self.members)


def sort_key(inst: Instance):
    """Descending score, then lexicographic box coordinates, label and view."""
    return (-inst.score, inst.box.as_tuple(), inst.label, inst.view or "")


def _weights(members: Sequence[Instance]) -> np.ndarray:
    """Member scores scaled by their maximum; all-zero scores give equal weights.

    Scaling keeps tiny (subnormal) scores from losing precision or underflowing.
    """
    weights = np.array([m.score for m in members], dtype=np.float64)
    top = weights.max()
    return np.ones_like(weights) if top <= 0.0 else weights / top


def weighted_box(members: Sequence[Instance]) -> BBox:
    """Score-weighted average of member coordinates.

    All-zero scores fall back to equal weights.
    """
    coords = np.array([m.box.as_tuple() for m in members], dtype=np.float64)
    weights = _weights(members)
    avg = weights @ coords / weights.sum()
    # keep inside the member envelope despite rounding
    avg = np.clip(avg, coords.min(axis=0), coords.max(axis=0))
    return BBox(*avg)


def vote_label(members: Sequence[Instance], method: str = "score-weighted") -> str:
    """Cluster label by majority count or summed score; ties go to the top-scoring member."""
    tally: dict[str, float] = defaultdict(float)
    for m in members:
        tally[m.label] += 1.0 if method == "majority" else m.score
    best = max(tally.values())
    tied = {lbl for lbl, v in tally.items() if math.isclose(v, best, rel_tol=0.0, abs_tol=1e-12)}
    for m in sorted(members, key=sort_key):
        if m.label in tied:
            return m.label
    raise AssertionError("unreachable")


def fuse_masks(cluster: FusedCluster | Sequence[Instance]) -> Optional[BinaryMask]:
    """Per-pixel score-weighted vote over member masks, binarized at 0.5.

    Members without a mask do not vote. Returns ``None`` when no member has one.
    """
    members = cluster.members if isinstance(cluster, FusedCluster) else tuple(cluster)
    voters = [m for m in members if m.mask is not None]
    if not voters:
        return None
    shape = voters[0].mask.shape
    for m in voters[1:]:
        if m.mask.shape != shape:
            raise ValueError(f"member mask shapes differ: {shape} vs {m.mask.shape}")
    weights = _weights(voters)
    votes = np.zeros(shape, dtype=np.float64)
    for w, m in zip(weights, voters):
        votes += w * m.mask.data
    return BinaryMask(2.0 * votes >= weights.sum())


def _fused_instance(members: Sequence[Instance], label_vote: str, with_mask: bool) -> Instance:
    score = float(np.mean([m.score for m in members]))
    mask = fuse_masks(members) if with_mask else None
    return Instance(weighted_box(members), min(score, 1.0), vote_label(members, label_vote), mask)


def _pool(predictions) -> list[Instance]:
    pooled: list[Instance] = []
    for p in predictions:
        if isinstance(p, Instance):
            pooled.append(p)
        elif hasattr(p, "instances"):
            pooled.extend(p.instances)
        else:
            pooled.extend(p)
    return pooled


def wbf(predictions: Iterable, cfg: FusionConfig = FusionConfig(), fuse_mask: bool = True) -> list[FusedCluster]:
    """Weighted boxes fusion over predictions already mapped to the original frame.

    ``predictions`` may be prediction sets, lists of instances, or instances.
    Each instance, taken in descending score order, joins the cluster whose
    current fused box overlaps it most with IoU >= ``cfg.iou_threshold``,
    otherwise it opens a new cluster. The fused box is the score-weighted mean
    of member boxes and the fused score is the plain mean of member scores.
    """
    pooled = sorted(_pool(predictions), key=sort_key)
    members: list[list[Instance]] = []
    boxes: list[BBox] = []
    for inst in pooled:
        best, best_iou = -1, -1.0
        for k, fb in enumerate(boxes):
            iou = box_iou(fb, inst.box)
            if iou >= cfg.iou_threshold and iou > best_iou:
                best, best_iou = k, iou
        if best < 0:
            members.append([inst])
            boxes.append(inst.box)
        else:
            members[best].append(inst)
            boxes[best] = weighted_box(members[best])
    clusters = [
        FusedCluster(tuple(ms), _fused_instance(ms, cfg.label_vote, fuse_mask)) for ms in members
    ]
    return clusters


def nms(predictions: Iterable, iou_threshold: float = 0.55) -> list[Instance]:
    """Greedy suppression; survivors have pairwise IoU below ``iou_threshold``."""
    kept: list[Instance] = []
    for inst in sorted(_pool(predictions), key=sort_key):
        if all(box_iou(inst.box, k.box) < iou_threshold for k in kept):
            kept.append(inst)
    return kept


def soft_nms(
    predictions: Iterable,
    iou_threshold: float = 0.55,
    sigma: float = 0.5,
    method: str = "linear",
    min_score: float = 0.001,
) -> list[Instance]:
    """Soft-NMS: decay overlapping scores instead of dropping boxes.

    ``linear`` multiplies by ``1 - IoU`` when IoU >= ``iou_threshold``;
    ``gaussian`` multiplies by ``exp(-IoU**2 / sigma)`` for every pair.
    Instances whose score decays below ``min_score`` are discarded.
    """
    pending = sorted(_pool(predictions), key=sort_key)
    kept: list[Instance] = []
    while pending:
        top = pending.pop(0)
        kept.append(top)
        decayed = []
        for inst in pending:
            iou = box_iou(top.box, inst.box)
            if method == "gaussian":
                factor = math.exp(-(iou * iou) / sigma)
            else:
                factor = 1.0 - iou if iou >= iou_threshold else 1.0
            score = inst.score * factor
            if score >= min_score:
                decayed.append(Instance(inst.box, score, inst.label, inst.mask, inst.view))
        pending = sorted(decayed, key=sort_key)
    return kept


def confidence_filter(instances: Iterable[Instance], threshold: float) -> list[Instance]:
    """Keep instances with score >= threshold, in their original order."""
    if not (0.0 <= threshold <= 1.0):
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    return [i for i in instances if i.score >= threshold]


def select_top1(instances: Iterable[Instance]) -> Optional[Instance]:
    """Highest score; ties go to the larger box, then lexicographically smaller coordinates."""
    best = None
    for inst in instances:
        key = (-inst.score, -inst.box.area, inst.box.as_tuple(), inst.label)
        if best is None or key < best[0]:
            best = (key, inst)
    return None if best is None else best[1]


def fuse(predictions: Iterable, cfg: FusionConfig = FusionConfig(), fuse_mask: bool = True) -> list[Instance]:
    """Run the configured algorithm and return fused instances sorted by score."""
    if cfg.algorithm == "wbf":
        out = [c.fused for c in wbf(predictions, cfg, fuse_mask=fuse_mask)]
    elif cfg.algorithm == "nms":
        out = nms(predictions, cfg.iou_threshold)
    else:
        out = soft_nms(
            predictions, cfg.iou_threshold, cfg.soft_nms_sigma, cfg.soft_nms_method, cfg.soft_nms_min_score
        )
    return sorted(out, key=sort_key)
