"""Three-step refinement of fused detections: NMS, density filter, classifier gate."""

from __future__ import annotations

import csv
import enum
import io
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .geometry import Detection, GroundTruth, boxes_to_array, pairwise_iou
from .ingest import DETECTION_HEADER, CropScoreTable, detection_row, group_by_image

ImageDims = tuple[float, float]


@dataclass(frozen=True)
class PostprocessConfig:
    nms_iou: float = 0.75
    grid_divisions: int = 4
    density_cutoff: int = 30
    high_density_threshold: float = 0.1
    low_density_threshold: float = 0.001
    gate_confidence_cutoff: float = 0.01
    gate_binary_threshold: float = 0.05
    hard_negative_iou: float = 0.1
    skip_gate: bool = False

    def __post_init__(self):
        for name in ("nms_iou", "high_density_threshold", "low_density_threshold",
                     "gate_confidence_cutoff", "gate_binary_threshold", "hard_negative_iou"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        if self.grid_divisions < 1:
            raise ValueError("grid_divisions must be >= 1")
        if self.density_cutoff < 0:
            raise ValueError("density_cutoff must be >= 0")


class Step(str, enum.Enum):
    NONE = "none"
    NMS = "nms"
    DENSITY = "density"
    GATE = "gate"


class MissingScoreError(LookupError):
    def __init__(self, missing: Sequence[Detection]):
        self.missing = list(missing)
        listing = "; ".join(
            f"{d.image_id} ({d.box.cx:g}, {d.box.cy:g}) conf={d.confidence:g}" for d in self.missing[:20]
        )
        more = f" and {len(self.missing) - 20} more" if len(self.missing) > 20 else ""
        super().__init__(f"{len(self.missing)} gated detection(s) have no crop score: {listing}{more}")


# ---------------------------------------------------------------------------
# step 1


def _nms_indices(dets: Sequence[Detection], iou_threshold: float) -> list[int]:
    # stable sort: equal confidences keep input order
    order = sorted(range(len(dets)), key=lambda i: -dets[i].confidence)
    by_image: dict[str, list[int]] = {}
    for i in order:
        by_image.setdefault(dets[i].image_id, []).append(i)
    keep_mask = np.zeros(len(dets), dtype=bool)
    for idx in by_image.values():
        boxes = boxes_to_array([dets[i].box for i in idx])
        suppressed = np.zeros(len(idx), dtype=bool)
        for k in range(len(idx)):
            if suppressed[k]:
                continue
            keep_mask[idx[k]] = True
            if k + 1 < len(idx):
                overlaps = pairwise_iou(boxes[k:k + 1], boxes[k + 1:])[0]
                suppressed[k + 1:] |= overlaps > iou_threshold
    return [i for i in order if keep_mask[i]]


def nms(dets: Sequence[Detection], iou_threshold: float = 0.75) -> list[Detection]:
    """Greedy NMS: keep a box unless it overlaps a kept, higher-ranked box by IoU > threshold.

    Boxes only suppress boxes from the same image. Output is sorted by
    descending confidence, ties in input order.
    """
    return [dets[i] for i in _nms_indices(dets, iou_threshold)]


# ---------------------------------------------------------------------------
# step 2


def grid_cell(cx: float, cy: float, image_dims: ImageDims, divisions: int) -> tuple[int, int]:
    """(row, col) of the density cell holding a center.

    Cells are half-open except the last row/column, which also takes the far
    border. Out-of-image centers fall into the nearest edge cell.
    """
    width, height = image_dims
    col = int(np.floor(cx * divisions / width))
    row = int(np.floor(cy * divisions / height))
    return min(max(row, 0), divisions - 1), min(max(col, 0), divisions - 1)


def _density_keep(dets: Sequence[Detection], image_dims, config: PostprocessConfig) -> list[bool]:
    dims = _dims_lookup(image_dims)
    cells = [(d.image_id, grid_cell(d.box.cx, d.box.cy, dims(d.image_id), config.grid_divisions)) for d in dets]
    counts = Counter(cells)
    keep = []
    for d, cell in zip(dets, cells):
        threshold = config.high_density_threshold if counts[cell] >= config.density_cutoff else config.low_density_threshold
        keep.append(d.confidence >= threshold)
    return keep


def density_filter(dets: Sequence[Detection], image_dims, config: PostprocessConfig = PostprocessConfig()) -> list[Detection]:
    """Drop low-confidence detections, with a stricter bar in crowded grid cells.

    ``image_dims`` is ``(width, height)`` or a mapping from image id to it.
    A cell holding at least ``density_cutoff`` detections keeps those with
    confidence >= ``high_density_threshold``; sparser cells use
    ``low_density_threshold``. Counts are taken before any removal.
    """
    return [d for d, k in zip(dets, _density_keep(dets, image_dims, config)) if k]


def _dims_lookup(image_dims):
    if isinstance(image_dims, Mapping):
        def lookup(image_id):
            try:
                return image_dims[image_id]
            except KeyError:
                raise KeyError(f"no image dimensions for {image_id!r}") from None
        return lookup
    return lambda image_id: image_dims


# ---------------------------------------------------------------------------
# step 3


def _gate_keep(dets: Sequence[Detection], scores: CropScoreTable | None, config: PostprocessConfig) -> list[bool]:
    keep, missing = [], []
    for d in dets:
        if d.confidence >= config.gate_confidence_cutoff:
            keep.append(True)
            continue
        score = scores.lookup(d) if scores is not None else None
        if score is None:
            missing.append(d)
            keep.append(False)
        else:
            keep.append(score >= config.gate_binary_threshold)
    if missing:
        raise MissingScoreError(missing)
    return keep


def classifier_gate(dets: Sequence[Detection], scores: CropScoreTable | None,
                    config: PostprocessConfig = PostprocessConfig()) -> list[Detection]:
    """Low-confidence detections (< ``gate_confidence_cutoff``) need crop score >= ``gate_binary_threshold``."""
    return [d for d, k in zip(dets, _gate_keep(dets, scores, config)) if k]


def stub_scores(dets: Sequence[Detection], config: PostprocessConfig = PostprocessConfig()) -> CropScoreTable:
    """Stand-in classifier: score = confidence / gate cutoff, capped at 1."""
    table = CropScoreTable()
    for d in dets:
        score = min(d.confidence / config.gate_confidence_cutoff, 1.0) if config.gate_confidence_cutoff > 0 else 1.0
        table.add(d.image_id, d.box.cx, d.box.cy, score)
    return table


# ---------------------------------------------------------------------------
# hard negatives


HARD_NEGATIVE_LABELS = ("cell", "garbage", "ambiguous")


def label_hard_negatives(preds: Sequence[Detection], gts: Sequence[GroundTruth],
                         iou_cut: float = 0.1) -> list[tuple[Detection, str]]:
    """Tag predictions whose best IoU with any ground truth is below ``iou_cut`` as garbage.

    Everything else is ambiguous; cell crops come from the ground truths.
    With no ground truths the best IoU is 0.
    """
    gts_by_image = group_by_image(gts)
    out = []
    for p in preds:
        same = gts_by_image.get(p.image_id, [])
        if same:
            best = float(pairwise_iou(boxes_to_array([p.box]), boxes_to_array([g.box for g in same])).max())
        else:
            best = 0.0
        out.append((p, "garbage" if best < iou_cut else "ambiguous"))
    return out


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class PipelineTrace:
    """Every input detection with the step that removed it (``Step.NONE`` if kept)."""

    entries: list[tuple[Detection, Step]] = field(default_factory=list)

    def counts(self) -> dict[str, int]:
        tally = Counter(step for _, step in self.entries)
        return {step.value: tally.get(step, 0) for step in Step}

    def after_each_step(self) -> dict[str, int]:
        n = len(self.entries)
        c = self.counts()
        after_nms = n - c["nms"]
        after_density = after_nms - c["density"]
        return {"input": n, "nms": after_nms, "density": after_density, "gate": after_density - c["gate"]}

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(DETECTION_HEADER + ["source", "removed_by"])
        for d, step in self.entries:
            writer.writerow(detection_row(d) + [step.value])
        return buf.getvalue()


def run_pipeline(dets: Sequence[Detection], image_dims, scores: CropScoreTable | None = None,
                 config: PostprocessConfig = PostprocessConfig()) -> tuple[list[Detection], PipelineTrace]:
    """NMS, then density filtering, then the classifier gate (unless ``skip_gate``).

    Returns the surviving detections, ordered by descending confidence, and a
    trace listing every input detection in input order.
    """
    removed_by = [Step.NONE] * len(dets)
    kept_idx = _nms_indices(dets, config.nms_iou)
    kept_set = set(kept_idx)
    for i in range(len(dets)):
        if i not in kept_set:
            removed_by[i] = Step.NMS

    density = _density_keep([dets[i] for i in kept_idx], image_dims, config)
    for i, k in zip(kept_idx, density):
        if not k:
            removed_by[i] = Step.DENSITY
    kept_idx = [i for i, k in zip(kept_idx, density) if k]

    if not config.skip_gate:
        gate = _gate_keep([dets[i] for i in kept_idx], scores, config)
        for i, k in zip(kept_idx, gate):
            if not k:
                removed_by[i] = Step.GATE
        kept_idx = [i for i, k in zip(kept_idx, gate) if k]

    trace = PipelineTrace(list(zip(dets, removed_by)))
    return [dets[i] for i in kept_idx], trace
