import numpy as np
import pytest

from aedet.data import Dataset, SceneSpec
from aedet.errors import EvalError, MetricError
from aedet.excitation import BoxLabel
from aedet.metrics import (
    IOU_THRESHOLDS,
    EvalReport,
    ap_is_monotone,
    average_precision,
    interpolated_ap,
    iou,
    match_detections,
    nms,
    report_from_detections,
)
from aedet.model import Detection

from oracles import ap_bruteforce, nms_bruteforce


def det(c, s, cx, cy, w, h):
    return Detection(c, s, cx, cy, w, h)


def random_dets(rng, n, classes=2):
    return [
        det(int(rng.integers(classes)), float(rng.choice([0.3, 0.5, 0.7, 0.9]) if rng.random() < 0.3 else rng.random()),
            *rng.uniform(0.2, 0.8, 2), *rng.uniform(0.05, 0.4, 2))
        for _ in range(n)
    ]


def random_gts(rng, n, classes=2):
    return [BoxLabel(int(rng.integers(classes)), *rng.uniform(0.2, 0.8, 2), *rng.uniform(0.05, 0.4, 2)) for _ in range(n)]


# --- IoU --------------------------------------------------------------------------


def test_iou_examples():
    assert iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    assert iou((0, 0, 2, 2), (1, 0, 3, 2)) == pytest.approx(1 / 3)
    assert iou((0, 0, 1, 1), (1, 0, 2, 1)) == 0.0


def test_iou_degenerate():
    with pytest.raises(MetricError):
        iou((0, 0, 0, 1), (0, 0, 1, 1))


def test_iou_symmetric_and_bounded():
    rng = np.random.default_rng(0)
    for _ in range(500):
        a, b = random_dets(rng, 2)
        v = iou(a, b)
        assert 0.0 <= v <= 1.0 and v == iou(b, a)


# --- NMS --------------------------------------------------------------------------


def test_nms_examples():
    a = det(0, 0.9, 0.5, 0.5, 0.2, 0.2)
    assert nms([a, det(0, 0.8, 0.5, 0.5, 0.2, 0.2)], 0.5) == [a]
    b = det(0, 0.8, 0.1, 0.1, 0.05, 0.05)
    assert nms([b, a], 0.5) == [a, b]
    other_class = det(1, 0.8, 0.5, 0.5, 0.2, 0.2)
    assert nms([a, other_class], 0.5) == [a, other_class]
    assert nms([], 0.5) == []


def test_nms_bad_threshold():
    with pytest.raises(MetricError):
        nms([], 0.0)


def test_nms_matches_bruteforce():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        dets = random_dets(rng, int(rng.integers(0, 9)))
        thr = float(rng.uniform(0.1, 0.9))
        assert nms(dets, thr) == nms_bruteforce(dets, thr)


def test_nms_output_has_no_overlapping_pairs():
    rng = np.random.default_rng(2)
    for _ in range(200):
        kept = nms(random_dets(rng, 10), 0.4)
        for i, a in enumerate(kept):
            for b in kept[i + 1 :]:
                assert a.class_id != b.class_id or iou(a, b) <= 0.4


# --- AP ---------------------------------------------------------------------------


def test_ap_examples():
    g = BoxLabel(0, 0.5, 0.5, 0.2, 0.2)
    assert average_precision([det(0, 0.9, 0.5, 0.5, 0.2, 0.2)], [g], 0.5) == 1.0
    assert average_precision([], [g], 0.5) == 0.0
    assert average_precision([det(1, 0.9, 0.5, 0.5, 0.2, 0.2)], [g], 0.5) == 0.0
    # a false positive ranked first halves precision at every recall level
    fp = det(0, 0.95, 0.1, 0.1, 0.1, 0.1)
    assert average_precision([fp, det(0, 0.9, 0.5, 0.5, 0.2, 0.2)], [g], 0.5) == pytest.approx(0.5)


def test_one_detection_cannot_match_two_gts():
    gts = [BoxLabel(0, 0.5, 0.5, 0.2, 0.2), BoxLabel(0, 0.5, 0.5, 0.2, 0.2)]
    flags = match_detections([det(0, 0.9, 0.5, 0.5, 0.2, 0.2)], gts, 0.5)
    assert flags == [True]
    assert average_precision([det(0, 0.9, 0.5, 0.5, 0.2, 0.2)], gts, 0.5) == pytest.approx(51 / 101)


def test_voc11_interpolation():
    tp = np.array([1.0, 0.0, 1.0])
    assert interpolated_ap(tp, 2, "voc11") == pytest.approx((6 * 1.0 + 5 * 2 / 3) / 11)
    with pytest.raises(MetricError):
        interpolated_ap(tp, 2, "bogus")


def test_ap_matches_bruteforce():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        dets = random_dets(rng, int(rng.integers(0, 7)))
        gts = random_gts(rng, int(rng.integers(0, 5)))
        thr = float(rng.choice(IOU_THRESHOLDS))
        assert average_precision(dets, gts, thr) == ap_bruteforce(dets, gts, thr)


def test_ap_monotone_in_threshold():
    rng = np.random.default_rng(4)
    for _ in range(200):
        dets = [random_dets(rng, int(rng.integers(0, 7))) for _ in range(3)]
        gts = [random_gts(rng, int(rng.integers(1, 5))) for _ in range(3)]
        curve = [average_precision(dets, gts, t) for t in IOU_THRESHOLDS]
        assert all(a >= b - 1e-12 for a, b in zip(curve, curve[1:]))


def test_ap_independent_of_image_order():
    rng = np.random.default_rng(5)
    for _ in range(50):
        dets = [random_dets(rng, int(rng.integers(0, 6))) for _ in range(5)]
        gts = [random_gts(rng, int(rng.integers(1, 4))) for _ in range(5)]
        perm = rng.permutation(5)
        a = report_from_detections(dets, gts)
        b = report_from_detections([dets[i] for i in perm], [gts[i] for i in perm])
        assert a.ap_curve == pytest.approx(b.ap_curve, abs=1e-12)


def test_perfect_and_empty_predictors():
    ds = Dataset.generate(SceneSpec(), 20)
    perfect = [[det(b.class_id, 1.0, b.cx, b.cy, b.w, b.h) for b in labels] for labels in ds.labels]
    rep = report_from_detections(perfect, ds.labels)
    assert rep.ap == 1.0 and rep.ap50 == 1.0 and rep.ap75 == 1.0
    assert all(v in (1.0, None) for v in rep.size_ap50.values())
    empty = report_from_detections([[] for _ in ds.labels], ds.labels)
    assert empty.ap == 0.0 and all(v == 0.0 for v in empty.ap_curve)


def test_report_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    dets = [random_dets(rng, 4) for _ in range(3)]
    gts = [random_gts(rng, 2) for _ in range(3)]
    rep = report_from_detections(dets, gts)
    assert ap_is_monotone(rep)
    assert rep.ap == pytest.approx(np.mean(rep.ap_curve))
    assert rep.thresholds == list(IOU_THRESHOLDS) and len(rep.thresholds) == 10
    rep.save(tmp_path / "r.json")
    assert EvalReport.load(tmp_path / "r.json") == rep
    rep.save_curve_csv(tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "threshold,ap" and len(lines) == 11


def test_empty_dataset_is_eval_error():
    with pytest.raises(EvalError):
        report_from_detections([], [])
