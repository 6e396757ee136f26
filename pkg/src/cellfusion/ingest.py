"""Reading and writing labels, detections, heatmaps, crop scores and manifests.

File formats
------------
YOLO labels
    one ``.txt`` per image, lines ``class cx cy w h`` normalized to [0, 1].
Detection CSV
    header ``image_id,cx,cy,w,h,confidence`` in pixels, an optional trailing
    ``source`` column; floats carry at most 6 fractional digits.
Heatmap grid
    little-endian: magic ``CYHM``, u32 rows, u32 cols, then row-major float32.
Crop-score CSV
    header ``image_id,cx,cy,score``.
Manifest
    JSON ``{"split": ..., "images": [{"image_id", "width", "height"}, ...]}``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .geometry import BBox, Detection, GroundTruth, Source

log = logging.getLogger(__name__)

DETECTION_HEADER = ["image_id", "cx", "cy", "w", "h", "confidence"]
SCORE_HEADER = ["image_id", "cx", "cy", "score"]
HEATMAP_MAGIC = b"CYHM"
HEATMAP_SUFFIX = ".cyhm"
CANONICAL_BOX = 100.0
SCORE_MATCH_TOL = 1e-6


class FormatError(ValueError):
    """An input file does not follow its documented format."""


# ---------------------------------------------------------------------------
# helpers


def format_float(value: float) -> str:
    """Fixed 6-digit rendering with trailing zeros trimmed (``512.0``, ``0.35``)."""
    text = f"{value:.6f}".rstrip("0")
    if text.endswith("."):
        text += "0"
    if text == "-0.0":
        text = "0.0"
    return text


def atomic_write(path: str | os.PathLike, data: bytes | str) -> None:
    """Write through a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = data.encode("utf-8") if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# ground truth


def load_labels(path: str | os.PathLike, image_dims: tuple[int, int], image_id: str | None = None) -> list[GroundTruth]:
    """Parse a YOLO label file into pixel-space ground truths.

    ``image_dims`` is ``(width, height)``. The image id defaults to the file stem.
    The class column is read and discarded.
    """
    path = Path(path)
    image_id = path.stem if image_id is None else image_id
    width, height = image_dims
    names = ("class", "cx", "cy", "w", "h")
    gts = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 5:
                missing = names[len(parts)] if len(parts) < 5 else "extra columns"
                raise FormatError(f"{path}:{lineno}: expected 5 fields, got {len(parts)} (field '{missing}')")
            values = []
            for name, raw in zip(names, parts):
                try:
                    values.append(float(raw))
                except ValueError:
                    raise FormatError(f"{path}:{lineno}: field '{name}' is not a number: {raw!r}") from None
            for name, v in zip(names[1:], values[1:]):
                if not 0.0 <= v <= 1.0:
                    log.warning("%s:%d: normalized %s=%g outside [0, 1]", path, lineno, name, v)
            _, cx, cy, w, h = values
            try:
                box = BBox(cx * width, cy * height, w * width, h * height)
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            if abs(box.w - CANONICAL_BOX) > 1e-3 or abs(box.h - CANONICAL_BOX) > 1e-3:
                log.warning("%s:%d: ground truth is %gx%g, not %gx%g", path, lineno, box.w, box.h, CANONICAL_BOX, CANONICAL_BOX)
            gts.append(GroundTruth(image_id, box))
    return gts


def write_labels(gts: Sequence[GroundTruth], path: str | os.PathLike, image_dims: tuple[int, int]) -> None:
    width, height = image_dims
    # repr of a builtin float round-trips exactly
    lines = [
        "0 " + " ".join(repr(float(v)) for v in (g.box.cx / width, g.box.cy / height, g.box.w / width, g.box.h / height))
        + "\n"
        for g in gts
    ]
    atomic_write(path, "".join(lines))


def resize_annotations(gts: Sequence[GroundTruth], target: float) -> list[GroundTruth]:
    """Square every box to ``target`` pixels, keeping centers bit-exact."""
    if target <= 0:
        raise ValueError(f"target size must be positive, got {target}")
    if not 10 <= target <= 120:
        log.warning("target size %g outside the explored 10..120 px range", target)
    return [GroundTruth(g.image_id, g.box.resized(target)) for g in gts]


def standardize_detections(dets: Sequence[Detection], size: float = CANONICAL_BOX) -> list[Detection]:
    """Reset predicted widths and heights to ``size``; everything else is kept."""
    if size <= 0:
        raise ValueError(f"standard size must be positive, got {size}")
    return [d if d.box.w == size and d.box.h == size else d.with_box(d.box.resized(size)) for d in dets]


# ---------------------------------------------------------------------------
# detections


def load_detections(path: str | os.PathLike, default_source: Source = Source.MERGED) -> list[Detection]:
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:6]] != DETECTION_HEADER:
            raise FormatError(f"{path}: missing header {','.join(DETECTION_HEADER)}")
        has_source = len(header) > 6 and header[6].strip() == "source"
        dets = []
        for row_index, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) < 6:
                raise FormatError(f"{path}: row {row_index}: expected at least 6 columns, got {len(row)}")
            try:
                cx, cy, w, h, conf = (float(v) for v in row[1:6])
                source = Source(row[6].strip()) if has_source and len(row) > 6 else default_source
                if not math.isfinite(conf):
                    raise ValueError(f"confidence {row[5]!r}")
                if not 0.0 <= conf <= 1.0:
                    clamped = min(max(conf, 0.0), 1.0)
                    log.warning("%s: row %d: confidence %g clamped to %g", path, row_index, conf, clamped)
                    conf = clamped
                dets.append(Detection(row[0], BBox(cx, cy, w, h), conf, source))
            except ValueError as exc:
                raise FormatError(f"{path}: row {row_index}: {exc}") from None
    return dets


def detection_row(d: Detection) -> list[str]:
    return [
        d.image_id,
        format_float(d.box.cx),
        format_float(d.box.cy),
        format_float(d.box.w),
        format_float(d.box.h),
        format_float(d.confidence),
        d.source.value,
    ]


def detections_to_csv(dets: Iterable[Detection]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(DETECTION_HEADER + ["source"])
    writer.writerows(detection_row(d) for d in dets)
    return buf.getvalue()


def write_detections(dets: Sequence[Detection], path: str | os.PathLike) -> None:
    """Write detections in input order; ``load_detections`` reads the result back."""
    atomic_write(path, detections_to_csv(dets))


def group_by_image(dets: Iterable) -> dict[str, list]:
    """Bucket items with an ``image_id`` attribute, preserving order within each bucket."""
    groups: dict[str, list] = {}
    for d in dets:
        groups.setdefault(d.image_id, []).append(d)
    return groups


# ---------------------------------------------------------------------------
# heatmaps


@dataclass(frozen=True)
class HeatmapFile:
    image_id: str
    scale: float
    grid: np.ndarray


def check_heatmap(grid: np.ndarray, what: str = "heatmap") -> np.ndarray:
    grid = np.asarray(grid)
    if grid.ndim != 2 or grid.shape[0] == 0 or grid.shape[1] == 0:
        raise ValueError(f"{what}: expected a non-empty 2D grid, got shape {grid.shape}")
    if not np.all(np.isfinite(grid)):
        raise ValueError(f"{what}: contains non-finite values")
    if np.any(grid < 0):
        raise ValueError(f"{what}: contains negative values")
    return grid


def write_heatmap(grid: np.ndarray, path: str | os.PathLike) -> None:
    grid = check_heatmap(grid, str(path))
    rows, cols = grid.shape
    payload = HEATMAP_MAGIC + struct.pack("<II", rows, cols) + np.ascontiguousarray(grid, dtype="<f4").tobytes()
    atomic_write(path, payload)


def read_heatmap(path: str | os.PathLike) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 12 or data[:4] != HEATMAP_MAGIC:
        raise FormatError(f"{path}: not a heatmap grid (bad magic)")
    rows, cols = struct.unpack("<II", data[4:12])
    expected = 12 + 4 * rows * cols
    if len(data) != expected:
        raise FormatError(f"{path}: {rows}x{cols} grid needs {expected} bytes, file has {len(data)}")
    grid = np.frombuffer(data, dtype="<f4", offset=12).reshape(rows, cols).astype(np.float32)
    try:
        return check_heatmap(grid, str(path))
    except ValueError as exc:
        raise FormatError(str(exc)) from None


def heatmap_filename(image_id: str, scale: float) -> str:
    return f"{image_id}@{scale:g}{HEATMAP_SUFFIX}"


def load_heatmap_dir(directory: str | os.PathLike) -> dict[str, dict[float, np.ndarray]]:
    """Read every ``<image_id>@<scale>.cyhm`` file below ``directory``."""
    out: dict[str, dict[float, np.ndarray]] = {}
    for path in sorted(Path(directory).glob(f"*{HEATMAP_SUFFIX}")):
        stem = path.name[: -len(HEATMAP_SUFFIX)]
        image_id, sep, scale_text = stem.rpartition("@")
        if not sep:
            raise FormatError(f"{path}: heatmap file name must look like <image_id>@<scale>{HEATMAP_SUFFIX}")
        try:
            scale = float(scale_text)
        except ValueError:
            raise FormatError(f"{path}: bad scale {scale_text!r}") from None
        out.setdefault(image_id, {})[scale] = read_heatmap(path)
    return out


# ---------------------------------------------------------------------------
# crop scores


@dataclass
class CropScoreTable:
    """Classifier scores for detection crops, keyed by image and center."""

    entries: dict[str, list[tuple[float, float, float]]] = field(default_factory=dict)
    _index: dict[str, np.ndarray] | None = field(default=None, init=False, repr=False, compare=False)

    def add(self, image_id: str, cx: float, cy: float, score: float) -> None:
        if not 0.0 <= score <= 1.0:
            raise ValueError(f"crop score {score} outside [0, 1]")
        self._index = None
        self.entries.setdefault(image_id, []).append((cx, cy, score))

    def lookup(self, det: Detection, tol: float = SCORE_MATCH_TOL) -> float | None:
        rows = self._arrays().get(det.image_id)
        if rows is None:
            return None
        hit = np.flatnonzero((np.abs(rows[:, 0] - det.box.cx) <= tol) & (np.abs(rows[:, 1] - det.box.cy) <= tol))
        return float(rows[hit[0], 2]) if len(hit) else None

    def _arrays(self) -> dict[str, np.ndarray]:
        if self._index is None:
            self._index = {k: np.array(v, dtype=np.float64).reshape(-1, 3) for k, v in self.entries.items()}
        return self._index

    def __len__(self) -> int:
        return sum(len(v) for v in self.entries.values())

    @classmethod
    def from_mapping(cls, scores: Mapping[Detection, float]) -> "CropScoreTable":
        table = cls()
        for det, score in scores.items():
            table.add(det.image_id, det.box.cx, det.box.cy, score)
        return table


def load_crop_scores(path: str | os.PathLike) -> CropScoreTable:
    path = Path(path)
    table = CropScoreTable()
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != SCORE_HEADER:
            raise FormatError(f"{path}: missing header {','.join(SCORE_HEADER)}")
        for row_index, row in enumerate(reader, start=1):
            if not row:
                continue
            try:
                if len(row) != 4:
                    raise ValueError(f"expected 4 columns, got {len(row)}")
                table.add(row[0], float(row[1]), float(row[2]), float(row[3]))
            except ValueError as exc:
                raise FormatError(f"{path}: row {row_index}: {exc}") from None
    return table


def write_crop_scores(table: CropScoreTable, path: str | os.PathLike) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SCORE_HEADER)
    for image_id in table.entries:
        for cx, cy, score in table.entries[image_id]:
            writer.writerow([image_id, format_float(cx), format_float(cy), format_float(score)])
    atomic_write(path, buf.getvalue())


# ---------------------------------------------------------------------------
# manifest


@dataclass
class DatasetManifest:
    images: list[tuple[str, int, int]]
    ground_truths: list[GroundTruth] = field(default_factory=list)
    split: str = "validation"

    def __post_init__(self):
        if self.split not in ("train", "validation"):
            raise ValueError(f"split must be 'train' or 'validation', got {self.split!r}")
        for image_id, w, h in self.images:
            if w <= 0 or h <= 0:
                raise ValueError(f"image {image_id}: dimensions must be positive")
        known = {i for i, _, _ in self.images}
        stray = sorted({g.image_id for g in self.ground_truths} - known)
        if stray:
            raise ValueError(f"ground truths reference unknown images: {', '.join(stray)}")

    @property
    def dims(self) -> dict[str, tuple[int, int]]:
        return {image_id: (w, h) for image_id, w, h in self.images}


def load_manifest(path: str | os.PathLike, labels_dir: str | os.PathLike | None = None) -> DatasetManifest:
    """Read a JSON manifest and, if given, the YOLO labels for each listed image.

    Images without a label file have no ground truths.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
        images = [(str(e["image_id"]), int(e["width"]), int(e["height"])) for e in raw["images"]]
        split = raw.get("split", "validation")
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed manifest: {exc}") from None
    gts: list[GroundTruth] = []
    if labels_dir is not None:
        for image_id, w, h in images:
            label_path = Path(labels_dir) / f"{image_id}.txt"
            if label_path.exists():
                gts.extend(load_labels(label_path, (w, h), image_id))
            else:
                log.debug("no label file for %s", image_id)
    try:
        return DatasetManifest(images, gts, split)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    payload = {
        "split": manifest.split,
        "images": [{"image_id": i, "width": w, "height": h} for i, w, h in manifest.images],
    }
    atomic_write(path, json.dumps(payload, indent=2) + "\n")
