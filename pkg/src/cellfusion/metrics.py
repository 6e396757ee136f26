"""Detection metrics: greedy IoU matching, P/R/F1, AP, mAP50-95, threshold sweeps.

Matching is COCO-style: predictions in descending confidence (input order on
ties) each claim the unclaimed ground truth of highest IoU, provided the IoU
is strictly greater than the threshold. Counts are summed over images before
ratios are taken.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import Detection, GroundTruth, boxes_to_array, pairwise_iou
from .ingest import group_by_image

log = logging.getLogger(__name__)

IOU_THRESHOLDS: tuple[float, ...] = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
AP_VARIANTS = ("allpoint", "101pt")


@dataclass(frozen=True)
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: list[tuple[int, int, float]]


@dataclass(frozen=True)
class Summary:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float


def _greedy(ious: np.ndarray, threshold: float) -> list[tuple[int, int, float]]:
    """Match rows (already in ranking order) to columns; returns (row, col, iou)."""
    pairs = []
    if ious.size == 0:
        return pairs
    free = np.ones(ious.shape[1], dtype=bool)
    for r in range(ious.shape[0]):
        row = np.where(free, ious[r], -1.0)
        c = int(np.argmax(row))
        if row[c] > threshold:
            free[c] = False
            pairs.append((r, c, float(row[c])))
    return pairs


def _ranking(preds: Sequence[Detection]) -> list[int]:
    return sorted(range(len(preds)), key=lambda i: -preds[i].confidence)


def match(preds: Sequence[Detection], gts: Sequence[GroundTruth], iou_threshold: float = 0.5) -> MatchResult:
    """One-to-one greedy matching; pairs hold indices into ``preds`` and ``gts``."""
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1], got {iou_threshold}")
    gt_index: dict[str, list[int]] = {}
    for j, g in enumerate(gts):
        gt_index.setdefault(g.image_id, []).append(j)
    pred_index: dict[str, list[int]] = {}
    for i in _ranking(preds):
        pred_index.setdefault(preds[i].image_id, []).append(i)
    pairs = []
    for image_id, rows in pred_index.items():
        cols = gt_index.get(image_id, [])
        if not cols:
            continue
        ious = pairwise_iou(boxes_to_array([preds[i].box for i in rows]), boxes_to_array([gts[j].box for j in cols]))
        pairs.extend((rows[r], cols[c], v) for r, c, v in _greedy(ious, iou_threshold))
    pairs.sort()
    tp = len(pairs)
    return MatchResult(tp, len(preds) - tp, len(gts) - tp, pairs)


def summary_from_counts(tp: int, fp: int, fn: int) -> Summary:
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return Summary(tp, fp, fn, precision, recall, f1)


def summary_metrics(preds: Sequence[Detection], gts: Sequence[GroundTruth], iou_threshold: float = 0.5) -> Summary:
    """TP/FP/FN over all images, with micro-averaged precision, recall and F1."""
    if not preds and not gts:
        log.warning("no predictions and no ground truths; all metrics are 0")
    m = match(preds, gts, iou_threshold)
    return summary_from_counts(m.tp, m.fp, m.fn)


# ---------------------------------------------------------------------------
# average precision


def ap_from_flags(tp_flags: np.ndarray, n_gt: int, variant: str = "allpoint") -> float:
    """AP of a ranked TP/FP sequence against ``n_gt`` ground truths.

    ``allpoint`` integrates the monotone precision envelope over every recall
    step; ``101pt`` averages the envelope sampled at recall 0, 0.01, ..., 1.
    """
    if variant not in AP_VARIANTS:
        raise ValueError(f"unknown AP variant {variant!r}; choose from {AP_VARIANTS}")
    if n_gt == 0 or len(tp_flags) == 0:
        return 0.0
    flags = np.asarray(tp_flags, dtype=bool)
    ctp = np.cumsum(flags)
    cfp = np.cumsum(~flags)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    if variant == "allpoint":
        steps = np.diff(recall, prepend=0.0)
        return float(np.sum(steps * envelope))
    samples = np.linspace(0.0, 1.0, 101)
    pos = np.searchsorted(recall, samples, side="left")
    sampled = np.where(pos < len(recall), envelope[np.minimum(pos, len(recall) - 1)], 0.0)
    return float(np.mean(sampled))


class _Ranked:
    """Predictions ranked once, with per-image IoU matrices cached for reuse."""

    def __init__(self, preds: Sequence[Detection], gts: Sequence[GroundTruth]):
        order = _ranking(preds)
        self.confidence = np.array([preds[i].confidence for i in order], dtype=np.float64)
        self.n_gt = len(gts)
        gts_by_image = group_by_image(gts)
        positions: dict[str, list[int]] = {}
        for pos, i in enumerate(order):
            positions.setdefault(preds[i].image_id, []).append(pos)
        self._blocks = []
        for image_id, pos in positions.items():
            image_gts = gts_by_image.get(image_id, [])
            if not image_gts:
                continue
            ious = pairwise_iou(
                boxes_to_array([preds[order[p]].box for p in pos]), boxes_to_array([g.box for g in image_gts])
            )
            self._blocks.append((np.array(pos), ious))

    def __len__(self) -> int:
        return len(self.confidence)

    def tp_flags(self, iou_threshold: float) -> np.ndarray:
        flags = np.zeros(len(self.confidence), dtype=bool)
        for pos, ious in self._blocks:
            for r, _, _ in _greedy(ious, iou_threshold):
                flags[pos[r]] = True
        return flags

    def prefix_len(self, min_confidence: float) -> int:
        """Number of ranked predictions with confidence >= ``min_confidence``."""
        return int(np.count_nonzero(self.confidence >= min_confidence))


def average_precision(preds: Sequence[Detection], gts: Sequence[GroundTruth], iou_threshold: float,
                      variant: str = "allpoint") -> float:
    if not gts:
        log.warning("no ground truths; AP defined as 0")
        return 0.0
    ranked = _Ranked(preds, gts)
    return ap_from_flags(ranked.tp_flags(iou_threshold), ranked.n_gt, variant)


def map50_95(preds: Sequence[Detection], gts: Sequence[GroundTruth],
             variant: str = "allpoint") -> tuple[float, dict[float, float]]:
    """Mean AP over IoU thresholds 0.50, 0.55, ..., 0.95, plus the per-threshold APs."""
    if not gts:
        log.warning("no ground truths; mAP defined as 0")
        return 0.0, {t: 0.0 for t in IOU_THRESHOLDS}
    ranked = _Ranked(preds, gts)
    per = {t: ap_from_flags(ranked.tp_flags(t), ranked.n_gt, variant) for t in IOU_THRESHOLDS}
    return sum(per.values()) / len(per), per


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class EvalReport:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    ap_per_threshold: dict[float, float]
    map50_95: float
    iou_threshold: float = 0.5
    ap_variant: str = "allpoint"

    def to_dict(self) -> dict:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "iou_threshold": self.iou_threshold,
            "ap_variant": self.ap_variant,
            "ap_per_threshold": {f"{t:.2f}": ap for t, ap in self.ap_per_threshold.items()},
            "map50_95": self.map50_95,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def table(self, name: str = "predictions") -> str:
        width = max(len(name), len("Model"))
        header = f"{'Model':<{width}}  {'TP':>7}  {'FP':>7}  {'Recall':>7}  {'Precision':>9}  {'F1':>7}  {'mAP50-95':>8}"
        row = (f"{name:<{width}}  {self.tp:>7d}  {self.fp:>7d}  {self.recall:>7.4f}  {self.precision:>9.4f}  "
               f"{self.f1:>7.4f}  {self.map50_95:>8.4f}")
        return f"{header}\n{row}\n"


def evaluate(preds: Sequence[Detection], gts: Sequence[GroundTruth], iou_threshold: float = 0.5,
             variant: str = "allpoint") -> EvalReport:
    s = summary_metrics(preds, gts, iou_threshold)
    mean_ap, per = map50_95(preds, gts, variant)
    return EvalReport(s.tp, s.fp, s.fn, s.precision, s.recall, s.f1, per, mean_ap, iou_threshold, variant)


# ---------------------------------------------------------------------------
# confidence sweep


@dataclass(frozen=True)
class SweepPoint:
    threshold: float
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    map50_95: float


@dataclass
class SweepCurve:
    points: list[SweepPoint] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["threshold,precision,recall,f1,map50_95"]
        lines += [f"{p.threshold:.6g},{p.precision:.6f},{p.recall:.6f},{p.f1:.6f},{p.map50_95:.6f}" for p in self.points]
        return "\n".join(lines) + "\n"

    def best(self, metric: str) -> SweepPoint:
        return max(self.points, key=lambda p: getattr(p, metric))


def sweep(preds: Sequence[Detection], gts: Sequence[GroundTruth], thresholds: Sequence[float],
          iou_threshold: float = 0.5, variant: str = "allpoint") -> SweepCurve:
    """Metrics for ``preds`` restricted to confidence >= t, for each t.

    Raising the confidence floor only drops the tail of the ranking, and greedy
    matching never revisits earlier decisions, so the TP flags of the full
    ranking are computed once and sliced per threshold.
    """
    thresholds = list(thresholds)
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("sweep thresholds must be strictly increasing")
    ranked = _Ranked(preds, gts)
    summary_flags = ranked.tp_flags(iou_threshold)
    map_flags = {t: ranked.tp_flags(t) for t in IOU_THRESHOLDS}
    points = []
    for t in thresholds:
        k = ranked.prefix_len(t)
        tp = int(np.count_nonzero(summary_flags[:k]))
        s = summary_from_counts(tp, k - tp, ranked.n_gt - tp)
        if ranked.n_gt:
            aps = [ap_from_flags(map_flags[u][:k], ranked.n_gt, variant) for u in IOU_THRESHOLDS]
            mean_ap = sum(aps) / len(aps)
        else:
            mean_ap = 0.0
        points.append(SweepPoint(t, s.tp, s.fp, s.fn, s.precision, s.recall, s.f1, mean_ap))
    return SweepCurve(points)
