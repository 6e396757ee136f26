from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cellfusion.fusion import STAGE1, STAGE2, FusionConfig, fuse, fuse_two_stage, match_pairs
from cellfusion.geometry import Source, centroid_distance

from helpers import det
from oracles import all_matchings_greedy_order


def test_match_close_pair():
    pairs, ua, ub = match_pairs([det(100, 100)], [det(108, 100)], 12)
    assert pairs == [(0, 0)] and ua == [] and ub == []


def test_match_far_apart():
    assert match_pairs([det(0, 0)], [det(100, 100)], 12) == ([], [0], [0])


def test_match_prefers_closest_pair():
    pairs, ua, ub = match_pairs([det(0, 0), det(10, 0)], [det(6, 0)], 12)
    assert pairs == [(1, 0)] and ua == [0] and ub == []


def test_match_threshold_inclusive():
    assert match_pairs([det(0, 0)], [det(12, 0)], 12)[0] == [(0, 0)]


def test_match_tie_break_by_index():
    # both a's are 5 px from the single b
    pairs, ua, _ = match_pairs([det(-5, 0), det(5, 0)], [det(0, 0)], 12)
    assert pairs == [(0, 0)] and ua == [1]


def test_match_rejects_mixed_images():
    with pytest.raises(ValueError):
        match_pairs([det(0, 0, image_id="a")], [det(0, 0, image_id="b")], 12)


def test_match_empty():
    assert match_pairs([], [], 12) == ([], [], [])
    assert match_pairs([det(1, 1)], [], 12) == ([], [0], [])


@settings(max_examples=200)
@given(st.lists(st.tuples(st.integers(0, 60), st.integers(0, 60)), max_size=7),
       st.lists(st.tuples(st.integers(0, 60), st.integers(0, 60)), max_size=7),
       st.floats(0, 30))
def test_match_agrees_with_plain_python(a_pts, b_pts, threshold):
    a = [det(x, y) for x, y in a_pts]
    b = [det(x, y) for x, y in b_pts]
    pairs, ua, ub = match_pairs(a, b, threshold)
    assert sorted(pairs) == sorted(all_matchings_greedy_order(a_pts, b_pts, threshold))
    assert sorted(ua + [i for i, _ in pairs]) == list(range(len(a)))
    assert sorted(ub + [j for _, j in pairs]) == list(range(len(b)))
    for i, j in pairs:
        assert centroid_distance(a[i].box, b[j].box) <= threshold


def test_fuse_averages_pair():
    (m,) = fuse([det(100, 100, 0.4)], [det(108, 100, 0.6)], STAGE1)
    assert (m.box.cx, m.box.cy, m.confidence) == (104.0, 100.0, 0.5)
    assert m.source is Source.MERGED and (m.box.w, m.box.h) == (100, 100)


def test_singleton_gate_is_strict():
    lone = det(0, 0, 0.35, source=Source.DETECTOR_A)
    assert fuse([lone], [], STAGE1) == []
    assert fuse([lone], [], STAGE2) == [lone]
    assert fuse([], [det(0, 0, 0.351)], STAGE1) == [det(0, 0, 0.351)]


def test_stage_two_keeps_weak_singletons():
    weak = det(5, 5, 0.001, source=Source.HEATMAP)
    assert fuse([], [weak], STAGE2) == [weak]


def test_two_stage_triple_average():
    a, b, h = det(100, 100, 0.9), det(104, 100, 0.5), det(102, 103, 0.3)
    (m,) = fuse_two_stage([a], [b], [h])
    # stage one: (102, 100, 0.7); stage two with the peak: (102, 101.5, 0.5)
    assert m.box.cx == pytest.approx(102.0) and m.box.cy == pytest.approx(101.5)
    assert m.confidence == pytest.approx((0.9 + 0.5) / 2 / 2 + 0.3 / 2)


def test_two_stage_heatmap_only_kept():
    h = det(500, 500, 0.2, source=Source.HEATMAP)
    assert fuse_two_stage([], [], [h]) == [h]


def test_two_stage_empty():
    assert fuse_two_stage([], [], []) == []


def test_fuse_groups_images_and_orders_by_id():
    a = [det(0, 0, 0.9, "z"), det(0, 0, 0.9, "a")]
    b = [det(1, 0, 0.5, "a"), det(300, 300, 0.8, "m")]
    out = fuse(a, b, STAGE1)
    assert [d.image_id for d in out] == ["a", "m", "z"]
    assert out[0].confidence == pytest.approx(0.7)


def test_fusion_config_validation():
    with pytest.raises(ValueError):
        FusionConfig(-1, 0.3)
    with pytest.raises(ValueError):
        FusionConfig(12, 1.5)


def _random_side(rng, n, image_ids=("p", "q"), source=Source.DETECTOR_A):
    return [det(*rng.uniform(0, 200, 2), rng.uniform(0, 1), image_id=rng.choice(image_ids), source=source)
            for _ in range(n)]


def _key(d):
    return (d.image_id, round(d.box.cx, 9), round(d.box.cy, 9), round(d.confidence, 12))


def test_fuse_properties_random():
    rng = np.random.default_rng(7)
    for _ in range(300):
        a, b = _random_side(rng, rng.integers(0, 12)), _random_side(rng, rng.integers(0, 12))
        cfg = FusionConfig(float(rng.uniform(0, 40)), float(rng.uniform(0, 1)))
        out = fuse(a, b, cfg)
        assert len(out) <= len(a) + len(b)
        # random continuous coordinates: no distance ties, so order symmetry holds
        assert Counter(map(_key, out)) == Counter(map(_key, fuse(b, a, cfg)))
        for d in out:
            if d.source is not Source.MERGED:
                assert d.confidence > cfg.singleton_confidence_threshold


def test_merged_center_is_midpoint_and_conf_bounded():
    rng = np.random.default_rng(3)
    for _ in range(200):
        a, b = _random_side(rng, 6, ("p",)), _random_side(rng, 6, ("p",))
        pairs, _, _ = match_pairs(a, b, 30)
        merged = [d for d in fuse(a, b, FusionConfig(30, 0.0)) if d.source is Source.MERGED]
        # merged detections come out in a-index order
        assert len(merged) == len(pairs)
        for m, (i, j) in zip(merged, sorted(pairs)):
            p, q = a[i], b[j]
            assert m.box.cx == (p.box.cx + q.box.cx) / 2 and m.box.cy == (p.box.cy + q.box.cy) / 2
            assert m.confidence >= min(p.confidence, q.confidence)


def test_zero_distance_degenerates_to_filtered_concat():
    rng = np.random.default_rng(11)
    a, b = _random_side(rng, 10, ("p",)), _random_side(rng, 10, ("p",))
    out = fuse(a, b, FusionConfig(0.0, 0.4))
    assert out == [d for d in a if d.confidence > 0.4] + [d for d in b if d.confidence > 0.4]


def test_fuse_jobs_equivalent():
    rng = np.random.default_rng(5)
    a, b = _random_side(rng, 40, tuple("abcdef")), _random_side(rng, 40, tuple("abcdef"))
    assert fuse(a, b, STAGE1, jobs=1) == fuse(a, b, STAGE1, jobs=4)
