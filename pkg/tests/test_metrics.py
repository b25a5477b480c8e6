import numpy as np
import pytest

from instocc.core import SparseInstanceOccupancy, VoxelGridSpec
from instocc.errors import EmptyGroundTruth, GridMismatch
from instocc.metrics import (
    EvalReport,
    average_map,
    average_precision,
    greedy_match,
    map_occ,
    semantic_labels,
    semantic_miou,
    voxel_iou,
)

GRID = VoxelGridSpec((0, 0, 0), (10, 10, 10), (1, 1, 1))


def occ(voxels, cls=0, score=1.0, track_id=None, grid=GRID):
    return SparseInstanceOccupancy(cls, score, sorted(voxels), track_id, grid)


def test_iou_examples():
    assert voxel_iou(occ([1, 2, 3]), occ([1, 2, 3])) == 1.0
    assert voxel_iou(occ([1, 2]), occ([3, 4])) == 0.0
    assert voxel_iou(occ([0, 1]), occ([1, 2])) == pytest.approx(1 / 3)
    assert voxel_iou(occ([]), occ([])) == 0.0


def test_iou_grid_mismatch():
    other = VoxelGridSpec((0, 0, 0), (10, 10, 10), (0.5, 0.5, 0.5))
    with pytest.raises(GridMismatch):
        voxel_iou(occ([1]), occ([1], grid=other))


def test_greedy_exact_match():
    tp, g2p = greedy_match([occ([1, 2])], [occ([1, 2])], 0.3)
    assert tp.tolist() == [True] and g2p.tolist() == [0]


def test_greedy_one_to_one():
    gt = occ([0, 1, 2, 3])
    # both predictions have IoU 0.5 with the GT; the higher score wins
    low = occ([0, 1], score=0.4)
    high = occ([2, 3], score=0.8)
    assert voxel_iou(low, gt) == voxel_iou(high, gt) == 0.5
    tp, g2p = greedy_match([low, high], [gt], 0.3)
    assert tp.tolist() == [False, True] and g2p.tolist() == [1]


def test_greedy_threshold_straddle():
    gt = occ([0, 1, 2, 3])
    pred = occ([0, 1, 10, 11, 12, 13])  # 2 shared of 8 voxels
    assert voxel_iou(pred, gt) == 0.25
    assert greedy_match([pred], [gt], 0.3)[0].tolist() == [False]
    assert greedy_match([pred], [gt], 0.2)[0].tolist() == [True]


def test_greedy_prefers_best_iou_and_breaks_ties_by_input_order():
    gts = [occ([0, 1, 2, 3]), occ([4, 5, 6, 7])]
    pred = occ([3, 4, 5, 6, 7])  # IoU 0.125 with gt0, 0.8 with gt1
    assert greedy_match([pred], gts, 0.1)[1].tolist() == [-1, 0]
    a, b = occ([0, 1], score=0.5), occ([0, 1], score=0.5)
    tp, _ = greedy_match([a, b], [occ([0, 1])], 0.5)
    assert tp.tolist() == [True, False]


def test_ap_examples():
    assert average_precision([True], 1) == 1.0
    assert average_precision([], 2) == 0.0
    # PR points (p=1, r=0.5), (p=0.5, r=0.5); area under the envelope is 0.5
    assert average_precision([True, False], 2) == 0.5
    assert average_precision([False], 0) == 0.0
    assert average_precision([], 0) == 1.0


def _ap_by_enumeration(labels, gt_count):
    # max precision at recall >= r, integrated over the distinct recall steps
    tp = fp = 0
    pts = []
    for lab in labels:
        tp += lab
        fp += not lab
        pts.append((tp / gt_count, tp / (tp + fp)))
    area, prev_r = 0.0, 0.0
    for r, _ in pts:
        if r > prev_r:
            area += (r - prev_r) * max(p for rr, p in pts if rr >= r)
            prev_r = r
    return area


def test_ap_matches_enumeration(rng):
    for _ in range(300):
        labels = list(rng.random(int(rng.integers(1, 30))) < 0.6)
        n_gt = max(int(sum(labels)), 1) + int(rng.integers(0, 5))
        assert average_precision(labels, n_gt) == pytest.approx(_ap_by_enumeration(labels, n_gt),
                                                                abs=1e-12)


def test_ap_interleaved_case():
    # TP FP TP with 3 GT: recall 1/3 at p=1, 2/3 at p=2/3 -> 1/3 + 1/3 * 2/3
    assert average_precision([True, False, True], 3) == pytest.approx(1 / 3 + 2 / 9)


def test_map_occ_averages_thresholds():
    # per-threshold mAPs in percent
    assert average_map([29.99, 21.36, 13.47]) == pytest.approx(21.6067, abs=1e-4)
    assert round(average_map([29.99, 21.36, 13.47]), 2) == 21.61
    assert average_map([0.4, 0.4, 0.4]) == pytest.approx(0.4, abs=1e-15)


def _scene(rng, n_frames=3, n_inst=4, n_classes=3):
    frames = []
    for _ in range(n_frames):
        insts = []
        for i in range(n_inst):
            start = int(rng.integers(0, 900))
            vox = np.unique(start + rng.integers(0, 60, size=30))
            insts.append(occ(vox, cls=int(rng.integers(n_classes)), score=float(rng.random())))
        frames.append(insts)
    return frames


def test_self_evaluation_is_perfect(rng):
    gt = _scene(rng)
    report = map_occ(gt, gt)
    assert report.map_occ == 1.0 and report.miou == 1.0
    assert all(v == (1.0, 1.0, 1.0) for v in report.per_class_ap.values())


def test_map_occ_is_mean_of_components(rng):
    gt = _scene(rng)
    preds = [[occ(np.unique(np.clip(x.voxels + rng.integers(-3, 4, size=len(x)), 0, 999)),
                  x.class_id, float(rng.random())) for x in f] for f in gt]
    report = map_occ(preds, gt)
    assert abs(report.map_occ - np.mean(report.map_at)) <= 1e-12
    assert 0 <= report.map_occ <= 1


def test_score_scaling_and_frame_duplication_invariance(rng):
    gt = _scene(rng)
    preds = [[occ(x.voxels[: len(x) // 2 + 3], x.class_id, float(rng.random())) for x in f] + [
        occ([990, 991], 0, 0.7)] for f in gt]
    base = map_occ(preds, gt)
    scaled = [[occ(x.voxels, x.class_id, x.score * 0.37) for x in f] for f in preds]
    assert map_occ(scaled, gt).per_class_ap == base.per_class_ap
    doubled = map_occ(preds + preds, gt + gt)
    for c in base.per_class_ap:
        assert doubled.per_class_ap[c] == pytest.approx(base.per_class_ap[c], abs=1e-12)


def test_removing_a_tp_never_increases_ap(rng):
    gt = _scene(rng, n_frames=2, n_inst=5, n_classes=1)
    preds = [[occ(x.voxels, 0, float(rng.random())) for x in f] for f in gt]
    preds[0].append(occ([995, 996, 997], 0, 0.99))
    base = map_occ(preds, gt)
    dropped = [list(f) for f in preds]
    dropped[1].pop(0)
    after = map_occ(dropped, gt)
    assert all(a <= b + 1e-12 for a, b in zip(after.per_class_ap[0], base.per_class_ap[0]))


def test_classes_absent_from_gt_are_excluded():
    gt = [[occ([1, 2, 3], cls=0)]]
    preds = [[occ([1, 2, 3], cls=0), occ([7, 8], cls=5, score=0.9)]]
    report = map_occ(preds, gt)
    assert set(report.per_class_ap) == {0}
    assert report.map_occ == 1.0


def test_empty_ground_truth_raises():
    with pytest.raises(EmptyGroundTruth):
        map_occ([[occ([1])]], [[]])


def test_semantic_overlap_tiebreak():
    a = occ([5], cls=0, score=0.9)
    b = occ([5], cls=1, score=0.4)
    vox, cls = semantic_labels([b, a])
    assert vox.tolist() == [5] and cls.tolist() == [0]
    # equal scores -> lower class id
    vox, cls = semantic_labels([occ([5], cls=3, score=0.5), occ([5], cls=2, score=0.5)])
    assert cls.tolist() == [2]


def test_semantic_miou_examples():
    gt = [[occ([0, 1, 2, 3], cls=0)]]
    assert semantic_miou(gt, gt)[0] == 1.0
    half = [[occ([0, 1], cls=0)]]
    miou, per = semantic_miou(half, gt)
    assert miou == 0.5 and per == {0: 0.5}


def test_semantic_miou_pools_globally():
    gt = [[occ([0, 1, 2, 3], cls=0)], [occ([10, 11], cls=0), occ([20, 21], cls=1)]]
    pred = [[occ([0, 1], cls=0)], [occ([10, 11], cls=0), occ([20], cls=1), occ([30], cls=2)]]
    miou, per = semantic_miou(pred, gt)
    assert per[0] == pytest.approx(4 / 6)
    assert per[1] == pytest.approx(1 / 2)
    assert 2 not in per
    assert miou == pytest.approx((4 / 6 + 1 / 2) / 2)


def test_semantic_wrong_class_counts_against_both():
    gt = [[occ([0, 1], cls=0), occ([2, 3], cls=1)]]
    pred = [[occ([0, 1, 2, 3], cls=0)]]
    _, per = semantic_miou(pred, gt)
    assert per == {0: 0.5, 1: 0.0}


def test_report_serialisation(rng):
    gt = _scene(rng)
    report = map_occ(gt, gt)
    text = report.to_text()
    assert "map_occ: 100.00" in text and "miou: 100.00" in text
    assert report.to_dict()["map_occ"] == 1.0
    r = EvalReport((0.1, 0.2, 0.3), {0: (0.2999, 0.2136, 0.1347)}, (0.2999, 0.2136, 0.1347),
                   average_map((0.2999, 0.2136, 0.1347)), 0.5, {0: 0.5}, ["car"])
    assert "map_occ: 21.61" in r.to_text() and "ap[car]: 29.99 21.36 13.47" in r.to_text()
