import numpy as np

from cellfusion.geometry import BBox, Detection, GroundTruth, Source


def det(cx, cy, conf=0.5, image_id="img", w=100.0, h=100.0, source=Source.MERGED):
    return Detection(image_id, BBox(float(cx), float(cy), float(w), float(h)), float(conf), source)


def gt(cx, cy, image_id="img", w=100.0, h=100.0):
    return GroundTruth(image_id, BBox(float(cx), float(cy), float(w), float(h)))


def random_detections(rng, n, image_id="img", extent=300.0, size_range=(20.0, 120.0)):
    out = []
    for _ in range(n):
        cx, cy = rng.uniform(0, extent, 2)
        w, h = rng.uniform(*size_range, 2)
        out.append(det(cx, cy, rng.uniform(0, 1), image_id, w, h))
    return out


def random_gts(rng, n, image_id="img", extent=300.0, size_range=(20.0, 120.0)):
    out = []
    for _ in range(n):
        cx, cy = rng.uniform(0, extent, 2)
        w, h = rng.uniform(*size_range, 2)
        out.append(gt(cx, cy, image_id, w, h))
    return out
