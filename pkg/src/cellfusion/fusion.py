"""Centroid-distance ensemble of two detection sources.

Detections from two sources that sit within ``distance_threshold`` pixels of
each other are taken to be the same cell and replaced by their average.
Unmatched detections survive only if their confidence is strictly above the
singleton threshold. The YOLO pair is fused first, then the result is fused
with the heatmap peaks.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import BBox, Detection, Source
from .ingest import CANONICAL_BOX, group_by_image


@dataclass(frozen=True)
class FusionConfig:
    distance_threshold: float = 12.0
    singleton_confidence_threshold: float = 0.35
    box_size: float = CANONICAL_BOX

    def __post_init__(self):
        if self.distance_threshold < 0:
            raise ValueError("distance_threshold must be >= 0")
        if not 0.0 <= self.singleton_confidence_threshold <= 1.0:
            raise ValueError("singleton_confidence_threshold must lie in [0, 1]")
        if self.box_size <= 0:
            raise ValueError("box_size must be positive")


STAGE1 = FusionConfig(12.0, 0.35)
STAGE2 = FusionConfig(12.0, 0.0)


def _centers(dets: Sequence[Detection]) -> np.ndarray:
    if not dets:
        return np.zeros((0, 2))
    return np.array([(d.box.cx, d.box.cy) for d in dets], dtype=np.float64)


def match_pairs(
    a: Sequence[Detection], b: Sequence[Detection], distance_threshold: float
) -> tuple[list[tuple[int, int]], list[int], list[int]]:
    """Greedy one-to-one matching by ascending centroid distance.

    All cross pairs within ``distance_threshold`` (inclusive) are visited in
    order of distance, ties broken by a-index then b-index; a pair is taken
    when neither side is already used.

    Returns ``(pairs, unmatched_a, unmatched_b)`` with indices into the inputs.
    """
    ids = {d.image_id for d in a} | {d.image_id for d in b}
    if len(ids) > 1:
        raise ValueError(f"match_pairs needs detections from one image, got {sorted(ids)}")
    ca, cb = _centers(a), _centers(b)
    dist = np.hypot(ca[:, None, 0] - cb[None, :, 0], ca[:, None, 1] - cb[None, :, 1])
    ia, ib = np.nonzero(dist <= distance_threshold)
    # lexsort keys: last is primary
    order = np.lexsort((ib, ia, dist[ia, ib]))
    used_a = np.zeros(len(a), dtype=bool)
    used_b = np.zeros(len(b), dtype=bool)
    pairs = []
    for k in order:
        i, j = int(ia[k]), int(ib[k])
        if not used_a[i] and not used_b[j]:
            used_a[i] = used_b[j] = True
            pairs.append((i, j))
    return pairs, np.flatnonzero(~used_a).tolist(), np.flatnonzero(~used_b).tolist()


def _merge(p: Detection, q: Detection, box_size: float) -> Detection:
    return Detection(
        p.image_id,
        BBox((p.box.cx + q.box.cx) / 2, (p.box.cy + q.box.cy) / 2, box_size, box_size),
        (p.confidence + q.confidence) / 2,
        Source.MERGED,
    )


def _fuse_image(a: Sequence[Detection], b: Sequence[Detection], config: FusionConfig) -> list[Detection]:
    pairs, _, unmatched_b = match_pairs(a, b, config.distance_threshold)
    partner = dict(pairs)
    gate = config.singleton_confidence_threshold
    out = []
    for i, det in enumerate(a):
        if i in partner:
            out.append(_merge(det, b[partner[i]], config.box_size))
        elif det.confidence > gate:
            out.append(det)
    out.extend(b[j] for j in unmatched_b if b[j].confidence > gate)
    return out


def fuse(a: Sequence[Detection], b: Sequence[Detection], config: FusionConfig = STAGE1, jobs: int = 1) -> list[Detection]:
    """Fuse two detection lists image by image.

    Output is ordered by image id; within an image, detections from ``a``
    (merged or kept) come first in a-order, followed by kept singletons of ``b``.
    An image present in only one source is fused against an empty list.
    """
    ga, gb = group_by_image(a), group_by_image(b)
    image_ids = sorted(set(ga) | set(gb))

    def work(image_id):
        return _fuse_image(ga.get(image_id, []), gb.get(image_id, []), config)

    if jobs > 1 and len(image_ids) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(work, image_ids))
    else:
        chunks = [work(i) for i in image_ids]
    return [d for chunk in chunks for d in chunk]


def fuse_two_stage(
    yolo_a: Sequence[Detection],
    yolo_b: Sequence[Detection],
    heatmap_dets: Sequence[Detection],
    stage1: FusionConfig = STAGE1,
    stage2: FusionConfig = STAGE2,
    jobs: int = 1,
) -> list[Detection]:
    return fuse(fuse(yolo_a, yolo_b, stage1, jobs), heatmap_dets, stage2, jobs)
