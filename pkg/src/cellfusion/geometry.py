"""Box primitives shared by every stage: BBox, Detection, GroundTruth, IoU.

Coordinates are continuous pixels, origin top-left, y pointing down. Boxes are
axis-aligned, stored by center, and never clipped to the image.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np


class Source(str, enum.Enum):
    DETECTOR_A = "detector-a"
    DETECTOR_B = "detector-b"
    HEATMAP = "heatmap"
    MERGED = "merged"


@dataclass(frozen=True)
class BBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box dimensions must be positive, got w={self.w}, h={self.h}")

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "BBox":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    def to_corners(self) -> tuple[float, float, float, float]:
        hw, hh = self.w / 2, self.h / 2
        return (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)

    @property
    def area(self) -> float:
        return self.w * self.h

    def resized(self, w: float, h: float | None = None) -> "BBox":
        """Same center, new dimensions."""
        return BBox(self.cx, self.cy, w, w if h is None else h)


@dataclass(frozen=True)
class Detection:
    image_id: str
    box: BBox
    confidence: float
    source: Source = Source.MERGED

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    def with_box(self, box: BBox) -> "Detection":
        return replace(self, box=box)


@dataclass(frozen=True)
class GroundTruth:
    image_id: str
    box: BBox


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes; 0 for disjoint or edge-touching boxes."""
    ax1, ay1, ax2, ay2 = a.to_corners()
    bx1, by1, bx2, by2 = b.to_corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # areas from the same corners keep iou(b, b) == 1 and the ratio <= 1
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def centroid_distance(a: BBox, b: BBox) -> float:
    return math.hypot(a.cx - b.cx, a.cy - b.cy)


def boxes_to_array(boxes: Sequence[BBox]) -> np.ndarray:
    """Stack boxes into an (n, 4) array of ``cx, cy, w, h``."""
    if not boxes:
        return np.zeros((0, 4))
    return np.array([(b.cx, b.cy, b.w, b.h) for b in boxes], dtype=np.float64)


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU matrix between two ``(n, 4)`` / ``(m, 4)`` center-format arrays.

    Uses the same operation order as :func:`iou`, so entries agree with the
    scalar version bit for bit.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ahw, ahh = a[:, 2] / 2, a[:, 3] / 2
    bhw, bhh = b[:, 2] / 2, b[:, 3] / 2
    ax1, ay1, ax2, ay2 = a[:, 0] - ahw, a[:, 1] - ahh, a[:, 0] + ahw, a[:, 1] + ahh
    bx1, by1, bx2, by2 = b[:, 0] - bhw, b[:, 1] - bhh, b[:, 0] + bhw, b[:, 1] + bhh
    iw = np.minimum(ax2[:, None], bx2[None, :]) - np.maximum(ax1[:, None], bx1[None, :])
    ih = np.minimum(ay2[:, None], by2[None, :]) - np.maximum(ay1[:, None], by1[None, :])
    overlap = (iw > 0) & (ih > 0)
    inter = np.where(overlap, iw * ih, 0.0)
    union = ((ax2 - ax1) * (ay2 - ay1))[:, None] + ((bx2 - bx1) * (by2 - by1))[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(overlap, inter / union, 0.0)
