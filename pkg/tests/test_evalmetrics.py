import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icm_fusion.evalmetrics import (ORIGINAL_LORA, ORIGINAL_MODEL, Box, Detection, MergeReport,
                                    average_precision, boxes_from_outputs, bpc, iou, map50,
                                    mean_average_precision, micro_detection_map, multitask_report,
                                    perplexity)
from icm_fusion.toybase import make_dataset, zero_adapter, flatten

PUBLISHED_APS = [0.96, 0.93, 0.91, 0.92, 0.90, 0.88, 0.87, 0.85]


def raster_iou(a: Box, b: Box, n: int = 600, extent: float = 3.0) -> float:
    c = (np.arange(n) + 0.5) * extent / n
    X, Y = np.meshgrid(c, c)
    ia = (X >= a.x_min) & (X < a.x_max) & (Y >= a.y_min) & (Y < a.y_max)
    ib = (X >= b.x_min) & (X < b.x_max) & (Y >= b.y_min) & (Y < b.y_max)
    return (ia & ib).sum() / (ia | ib).sum()


def brute_ap(hits: list[bool], n_gt: int) -> float:
    """Sum over each recall step k/G of the best precision reached at recall >= k/G."""
    pts, tp = [], 0
    for i, h in enumerate(hits, 1):
        tp += h
        pts.append((tp / n_gt, tp / i))
    total = 0.0
    for k in range(1, n_gt + 1):
        ok = [p for r, p in pts if r >= k / n_gt - 1e-15]
        total += max(ok, default=0.0) / n_gt
    return total


def unit(x, y, s=1.0):
    return Box(x, y, x + s, y + s)


# ---------------------------------------------------------------- IoU


def test_iou_examples():
    a, b = Box(0, 0, 2, 2), Box(1, 1, 3, 3)
    assert abs(iou(a, b) - 1 / 7) < 1e-9
    assert abs(iou(a, b) - raster_iou(a, b)) < 1e-2
    assert iou(a, a) == 1.0
    assert iou(unit(0, 0), unit(5, 5)) == 0.0
    assert iou(Box(1, 1, 1, 1), Box(1, 1, 1, 1)) == 0.0


def test_box_validation():
    with pytest.raises(ValueError):
        Box(1, 0, 0, 1)
    with pytest.raises(ValueError):
        Box(0, 0, float("nan"), 1)
    with pytest.raises(ValueError):
        Detection(unit(0, 0), float("inf"))


coord = st.floats(-10, 10, allow_nan=False)


@settings(max_examples=100, deadline=None)
@given(coord, coord, st.floats(0, 5), st.floats(0, 5), coord, coord, st.floats(0, 5), st.floats(0, 5))
def test_iou_symmetric_and_bounded(x1, y1, w1, h1, x2, y2, w2, h2):
    a, b = Box(x1, y1, x1 + w1, y1 + h1), Box(x2, y2, x2 + w2, y2 + h2)
    assert iou(a, b) == iou(b, a)
    assert 0.0 <= iou(a, b) <= 1.0


# ---------------------------------------------------------------- AP


def test_ap_trivial():
    g = unit(0, 0)
    assert average_precision([Detection(g, 0.9)], [g]) == 1.0
    # IoU 0.3 against thresh 0.5
    shifted = Box(0, 0, 1, 0.3)
    assert math.isclose(iou(shifted, g), 0.3)
    assert average_precision([Detection(shifted, 0.9)], [g]) == 0.0
    assert average_precision([], [g]) == 0.0
    assert average_precision([Detection(g, 0.9)], []) == 0.0
    with pytest.raises(ValueError):
        average_precision([], [g], 0.0)


def test_ap_hit_miss_hit_against_brute_force():
    g1, g2 = unit(0, 0), unit(5, 5)
    dets = [Detection(g1, 0.9), Detection(unit(20, 20), 0.8), Detection(g2, 0.7)]
    ap = average_precision(dets, [g1, g2])
    assert ap == pytest.approx(brute_ap([True, False, True], 2), abs=1e-15)
    assert ap == pytest.approx(0.5 * 1.0 + 0.5 * (2 / 3), abs=1e-15)


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 6), st.integers(0, 8), st.integers(0, 10 ** 6))
def test_ap_matches_brute_force(n_gt, n_false, seed):
    # disjoint gts; each true detection copies a distinct gt, false ones land far away
    r = np.random.default_rng(seed)
    gts = [unit(3.0 * i, 0) for i in range(n_gt)]
    n_true = int(r.integers(0, n_gt + 1))
    hit_flags = [True] * n_true + [False] * n_false
    r.shuffle(hit_flags)
    scores = np.sort(r.random(len(hit_flags)))[::-1] + np.arange(len(hit_flags))[::-1]
    dets, gi = [], 0
    for flag, s in zip(hit_flags, scores):
        if flag:
            dets.append(Detection(gts[gi], float(s)))
            gi += 1
        else:
            dets.append(Detection(unit(100.0, 100.0 + 3 * len(dets)), float(s)))
    expected = brute_ap(hit_flags, n_gt) if dets else 0.0
    assert average_precision(dets, gts) == pytest.approx(expected, abs=1e-12)


def test_ap_each_gt_matched_once():
    g = unit(0, 0)
    dets = [Detection(g, 0.9), Detection(g, 0.8)]
    assert average_precision(dets, [g]) == 1.0
    assert brute_ap([True, False], 1) == 1.0


def test_ap_score_rescaling_invariant():
    g1, g2 = unit(0, 0), unit(4, 0)
    dets = [Detection(unit(0.1, 0), 0.3), Detection(g2, 0.6), Detection(unit(9, 9), 0.5)]
    scaled = [Detection(d.box, 7.5 * d.score) for d in dets]
    assert average_precision(dets, [g1, g2]) == average_precision(scaled, [g1, g2])


def test_threshold_parameter():
    g = unit(0, 0)
    d = [Detection(Box(0, 0, 1, 0.6), 1.0)]  # IoU 0.6
    assert average_precision(d, [g], 0.5) == 1.0
    assert average_precision(d, [g], 0.75) == 0.0


def test_mean_average_precision_per_class():
    g = unit(0, 0)
    dets = [Detection(g, 0.9, 0), Detection(unit(8, 8), 0.9, 1)]
    assert mean_average_precision(dets, {0: [g], 1: [unit(4, 4)]}) == 0.5


# ---------------------------------------------------------------- map50 / PPL / BPC


def test_map50_examples():
    assert map50([1.0]) == 1.0
    assert map50([0.0, 1.0]) == 0.5
    assert map50(PUBLISHED_APS) == pytest.approx(0.9025, abs=1e-12)
    assert round(map50(PUBLISHED_APS), 2) == 0.90
    assert map50([0.37] * 9) == pytest.approx(0.37, abs=1e-15)
    with pytest.raises(ValueError):
        map50([])


def test_perplexity_examples():
    assert perplexity([0.0, 0.0]) == 1.0
    assert perplexity([math.log(1 / 16)] * 10) == 16.0
    assert perplexity([math.log(0.5), math.log(0.25)]) == pytest.approx(2 ** 1.5, rel=1e-12)
    with pytest.raises(ValueError):
        perplexity([])
    with pytest.raises(ValueError):
        perplexity([0.1])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-20, 0), min_size=1, max_size=20), st.randoms(use_true_random=False),
       st.floats(0.0, 3.0))
def test_perplexity_order_and_monotone(lp, rnd, dec):
    p = perplexity(lp)
    shuffled = list(lp)
    rnd.shuffle(shuffled)
    assert perplexity(shuffled) == pytest.approx(p, rel=1e-12)
    worse = [lp[0] - dec] + lp[1:]
    assert perplexity(worse) >= p * (1 - 1e-12)
    assert p >= 1.0


def test_bpc_examples_and_monotone():
    assert bpc(1.0, 3.0) == 0.0
    assert bpc(2.0, 1.0) == 1.0
    assert bpc(8.0, 4.0) == 0.75
    assert bpc(4.0, 2.0) < bpc(5.0, 2.0)
    assert bpc(4.0, 2.0) > bpc(4.0, 3.0)
    with pytest.raises(ValueError):
        bpc(0.5, 1.0)
    with pytest.raises(ValueError):
        bpc(2.0, 0.0)


# ---------------------------------------------------------------- micro detection


def test_boxes_from_outputs():
    (b,) = boxes_from_outputs(np.array([[1.0, 2.0, -0.5, 0.25, 9.0]]))
    assert b == Box(0.5, 1.75, 1.5, 2.25)
    with pytest.raises(ValueError):
        boxes_from_outputs(np.zeros((2, 3)))


def test_micro_detection_perfect_and_shape(rng):
    t = rng.normal(size=(12, 16))
    assert micro_detection_map(t, t) == 1.0
    assert micro_detection_map(t + 50.0, t) == 0.0
    with pytest.raises(ValueError):
        micro_detection_map(t[:3], t)


# ---------------------------------------------------------------- reports


def _report():
    r = MergeReport()
    for m, vals in (("soup", [0.3, 0.1]), ("icm", [0.2, 0.1])):
        for tid, v in zip(("t1", "t0"), vals):
            r.add(m, tid, "loss", v)
    return r


def test_report_averages():
    r = _report()
    assert r.methods == ["icm", "soup"]
    assert r.average("soup") == pytest.approx(0.2, abs=1e-15)
    assert r.value("icm", "t1", "loss") == 0.2
    with pytest.raises(KeyError):
        r.value("icm", "t9", "loss")


def test_report_csv_roundtrip():
    r = _report()
    text = r.to_csv()
    assert text.splitlines()[0] == "method,task_id,metric,value"
    back = MergeReport.from_csv(text)
    assert back.rows == r.rows and back.to_csv() == text
    with pytest.raises(ValueError):
        MergeReport.from_csv("a,b\n")


def test_report_json_recomputes_averages():
    import json
    r = _report()
    doc = json.loads(r.to_json())
    doc["averages"] = [{"method": "soup", "metric": "loss", "value": 99.0}]
    back = MergeReport.from_json(json.dumps(doc))
    assert back.rows == r.rows and back.averages() == r.averages()


def test_multitask_report_rows(base, sequences, suite):
    finals = {s.task_id: s.final for s in sequences}
    tasks = {t.task_id: make_dataset(t, "test") for t in suite}
    zero = flatten(zero_adapter(base, 4, 8.0))
    rep = multitask_report(base, {"zero": zero, "soup": sequences[0].final}, finals, tasks)
    assert rep.methods == sorted([ORIGINAL_LORA, ORIGINAL_MODEL, "soup", "zero"])
    for tid in tasks:
        assert rep.value("zero", tid, "loss") == rep.value(ORIGINAL_MODEL, tid, "loss")
        assert rep.value(ORIGINAL_LORA, tid, "loss") < rep.value(ORIGINAL_MODEL, tid, "loss")
        loss = rep.value("soup", tid, "loss")
        assert rep.value("soup", tid, "score") == 1.0 / (1.0 + loss)
    assert len(rep.rows) == 4 * len(tasks) * 2
