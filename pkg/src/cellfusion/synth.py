"""Deterministic synthetic fixture set for end-to-end runs.

``python -m cellfusion.synth OUT_DIR`` writes a manifest, YOLO labels, two
detector CSVs, multi-scale heatmaps, crop scores and a ``pipeline.cfg`` that
points at all of them.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .fusion import fuse_two_stage
from .geometry import BBox, Detection, GroundTruth, Source
from .heatmap import PeakConfig, peaks_from_scales, render_targets
from .ingest import (
    CropScoreTable,
    DatasetManifest,
    atomic_write,
    heatmap_filename,
    load_detections,
    load_heatmap_dir,
    standardize_detections,
    write_crop_scores,
    write_detections,
    write_heatmap,
    write_labels,
    write_manifest,
)

SEED = 20250101


def _centers(rng: np.random.Generator, size: int, n: int, min_gap: float = 60.0) -> list[tuple[float, float]]:
    out: list[tuple[float, float]] = []
    while len(out) < n:
        c = tuple(rng.uniform(50, size - 50, 2).round(2))
        if all(np.hypot(c[0] - x, c[1] - y) >= min_gap for x, y in out):
            out.append(c)
    return out


def _detector(rng, image_id, centers, spurious, box, source, recall, jitter) -> list[Detection]:
    dets = []
    for cx, cy in centers:
        if rng.random() < recall:
            dx, dy = rng.normal(0, jitter, 2)
            dets.append(Detection(image_id, BBox(round(cx + dx, 3), round(cy + dy, 3), box, box),
                                  round(float(rng.uniform(0.3, 0.95)), 4), source))
    for x, y in spurious:
        dx, dy = rng.normal(0, jitter, 2)
        low = rng.random() < 0.4
        conf = float(rng.uniform(0.0005, 0.01) if low else rng.uniform(0.01, 0.4))
        dets.append(Detection(image_id, BBox(round(x + dx, 3), round(y + dy, 3), box, box), round(conf, 4), source))
    return dets


def _spurious(rng, size, n, crowd) -> list[tuple[float, float]]:
    points = [tuple(rng.uniform(0, size, 2)) for _ in range(n)]
    # a dense patch of weak candidates in the top-left density cell
    cell = size / 4
    points += [tuple(rng.uniform(4, cell - 4, 2)) for _ in range(crowd)]
    return points


def _heatmap(rng, centers, size, scale) -> np.ndarray:
    n = round(size * scale)
    grid = np.zeros((n, n), dtype=np.float32)
    for cx, cy in centers:
        amp = np.float32(rng.uniform(0.35, 0.95))
        g = render_targets([(cx * scale, cy * scale)], 100 * scale, n, n)
        np.maximum(grid, g * amp, out=grid)
    noise = np.abs(rng.normal(0, 0.01, grid.shape)).astype(np.float32)
    return grid + noise


def write_fixture_set(out_dir: str | Path, n_images: int = 6, size: int = 512, seed: int = SEED) -> Path:
    out = Path(out_dir)
    rng = np.random.default_rng(seed)
    peak_config = PeakConfig()
    images = []
    det_a: list[Detection] = []
    det_b: list[Detection] = []
    heat_dir = out / "heatmaps"
    for k in range(n_images):
        image_id = f"img_{k:03d}"
        images.append((image_id, size, size))
        centers = _centers(rng, size, int(rng.integers(7, 12)))
        gts = [GroundTruth(image_id, BBox(cx, cy, 100.0, 100.0)) for cx, cy in centers]
        write_labels(gts, out / "labels" / f"{image_id}.txt", (size, size))
        spurious = _spurious(rng, size, 20, 45 if k % 3 == 0 else 0)
        det_a += _detector(rng, image_id, centers, spurious, 20.0, Source.DETECTOR_A, 0.95, 2.5)
        det_b += _detector(rng, image_id, centers, spurious, 50.0, Source.DETECTOR_B, 0.97, 3.0)
        seen = [c for c in centers if rng.random() < 0.8]
        for scale in peak_config.scales:
            write_heatmap(_heatmap(rng, seen, size, scale), heat_dir / heatmap_filename(image_id, scale))
    manifest = DatasetManifest(images, [], "validation")
    write_manifest(manifest, out / "manifest.json")
    write_detections(det_a, out / "detector_a.csv")
    write_detections(det_b, out / "detector_b.csv")

    # crop scores for every fused candidate, as an external classifier would supply
    maps = load_heatmap_dir(heat_dir)
    heat = [d for image_id, _, _ in images for d in peaks_from_scales(maps[image_id], peak_config, image_id, (size, size))]
    write_detections(heat, out / "_peaks.csv")
    heat = load_detections(out / "_peaks.csv")
    (out / "_peaks.csv").unlink()
    a = standardize_detections(load_detections(out / "detector_a.csv"))
    b = standardize_detections(load_detections(out / "detector_b.csv"))
    write_detections(fuse_two_stage(a, b, heat), out / "_fused.csv")
    fused = load_detections(out / "_fused.csv")
    (out / "_fused.csv").unlink()
    scores = CropScoreTable()
    for d in fused:
        scores.add(d.image_id, d.box.cx, d.box.cy, round(float(rng.uniform(0, 1)), 4))
    write_crop_scores(scores, out / "scores.csv")

    atomic_write(out / "pipeline.cfg", (
        "# synthetic fixture set\n"
        "io.detector_a = detector_a.csv\n"
        "io.detector_b = detector_b.csv\n"
        "io.heatmaps = heatmaps\n"
        "io.manifest = manifest.json\n"
        "io.labels = labels\n"
        "io.scores = scores.csv\n"
    ))
    return out


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out_dir")
    parser.add_argument("--images", type=int, default=6)
    parser.add_argument("--size", type=int, default=512)
    args = parser.parse_args(argv)
    write_fixture_set(args.out_dir, args.images, args.size)
    return 0


if __name__ == "__main__":
    sys.exit(main())
