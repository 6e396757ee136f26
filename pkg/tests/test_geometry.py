import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cellfusion.geometry import BBox, Detection, boxes_to_array, centroid_distance, iou, pairwise_iou

from oracles import raster_iou

coord = st.floats(-500, 500, allow_nan=False)
size = st.floats(1, 200, allow_nan=False)
boxes = st.builds(BBox, coord, coord, size, size)
# dyadic values survive corner arithmetic exactly
dyadic = st.integers(-4000, 4000).map(lambda k: k / 8)
dyadic_size = st.integers(1, 1600).map(lambda k: k / 8)


def test_iou_identity():
    b = BBox(10.0, 20.0, 30.0, 40.0)
    assert iou(b, b) == 1.0


def test_iou_disjoint():
    assert iou(BBox(100, 100, 100, 100), BBox(300, 100, 100, 100)) == 0.0


def test_iou_half_overlap_matches_raster():
    a, b = BBox(100, 100, 100, 100), BBox(150, 100, 100, 100)
    assert raster_iou(a, b) == pytest.approx(1 / 3, abs=1e-12)
    assert iou(a, b) == pytest.approx(raster_iou(a, b), abs=1e-12)


def test_iou_shared_edge_is_zero():
    assert iou(BBox(50, 50, 100, 100), BBox(150, 50, 100, 100)) == 0.0


@pytest.mark.parametrize("offset, expected", [(10, 9 / 11), (50, 1 / 3), (0, 1.0), (100, 0.0)])
def test_iou_shift_against_raster(offset, expected):
    a, b = BBox(100, 100, 100, 100), BBox(100 + offset, 100, 100, 100)
    assert iou(a, b) == pytest.approx(expected, abs=1e-12)
    assert raster_iou(a, b) == pytest.approx(expected, abs=1e-12)


def test_centroid_distance_examples():
    assert centroid_distance(BBox(5, 5, 1, 1), BBox(5, 5, 9, 9)) == 0.0
    assert centroid_distance(BBox(0, 0, 1, 1), BBox(3, 4, 1, 1)) == 5.0
    assert centroid_distance(BBox(100, 100, 100, 100), BBox(108, 100, 100, 100)) == 8.0


def test_invalid_boxes_rejected():
    with pytest.raises(ValueError):
        BBox(0, 0, 0, 10)
    with pytest.raises(ValueError):
        BBox(0, 0, 10, -1)


def test_detection_confidence_range():
    with pytest.raises(ValueError):
        Detection("x", BBox(0, 0, 1, 1), 1.5)


@given(boxes, boxes)
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0


@given(boxes, boxes)
def test_iou_one_only_for_equal_boxes(a, b):
    if iou(a, b) == 1.0:
        assert math.isclose(a.cx, b.cx, abs_tol=1e-9) and math.isclose(a.w, b.w, rel_tol=1e-9)
    if a == b:
        assert iou(a, b) == 1.0


@given(st.builds(BBox, dyadic, dyadic, dyadic_size, dyadic_size), st.builds(BBox, dyadic, dyadic, dyadic_size, dyadic_size),
       dyadic, dyadic)
def test_translation_invariance(a, b, dx, dy):
    shift = lambda box: BBox(box.cx + dx, box.cy + dy, box.w, box.h)
    assert iou(shift(a), shift(b)) == pytest.approx(iou(a, b), abs=1e-12)
    assert centroid_distance(shift(a), shift(b)) == pytest.approx(centroid_distance(a, b), abs=1e-9)


@given(boxes, boxes, boxes)
def test_distance_triangle_inequality(a, b, c):
    assert centroid_distance(a, a) == 0.0
    assert centroid_distance(a, c) <= centroid_distance(a, b) + centroid_distance(b, c) + 1e-9


@given(st.builds(BBox, dyadic, dyadic, dyadic_size, dyadic_size))
def test_corner_round_trip_exact_on_dyadic(b):
    assert BBox.from_corners(*b.to_corners()) == b


@given(boxes)
def test_corner_round_trip_close(b):
    r = BBox.from_corners(*b.to_corners())
    assert r.cx == pytest.approx(b.cx, abs=1e-9) and r.w == pytest.approx(b.w, rel=1e-12)


@given(st.lists(boxes, min_size=1, max_size=6), st.lists(boxes, min_size=1, max_size=6))
def test_pairwise_matches_scalar_bitwise(xs, ys):
    m = pairwise_iou(boxes_to_array(xs), boxes_to_array(ys))
    for i, a in enumerate(xs):
        for j, b in enumerate(ys):
            assert m[i, j] == iou(a, b)


def test_pairwise_empty():
    assert pairwise_iou(np.zeros((0, 4)), boxes_to_array([BBox(0, 0, 1, 1)])).shape == (0, 1)
