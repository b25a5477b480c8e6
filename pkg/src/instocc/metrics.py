"""Instance-occupancy mAP and class-aggregated semantic mIoU.

Instances are matched on voxel-set IoU. For each class and IoU threshold,
TP/FP labels from every frame are pooled and ranked by score before the
all-point interpolated AP is computed. The headline number averages the
per-threshold mAPs over ``(0.1, 0.2, 0.3)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import SparseInstanceOccupancy, VoxelGridSpec
from .errors import EmptyGroundTruth, GridMismatch

DEFAULT_IOU_THRESHOLDS = (0.1, 0.2, 0.3)

Frames = Sequence[Sequence[SparseInstanceOccupancy]]


def _check_grids(a: Optional[VoxelGridSpec], b: Optional[VoxelGridSpec]):
    if a is not None and b is not None and a != b:
        raise GridMismatch(f"grids differ: {a} vs {b}")


def voxel_iou(a: SparseInstanceOccupancy, b: SparseInstanceOccupancy) -> float:
    _check_grids(a.grid, b.grid)
    union = len(a) + len(b)
    if union == 0:
        return 0.0
    inter = np.intersect1d(a.voxels, b.voxels, assume_unique=True).size
    return inter / (union - inter)


def iou_matrix(preds, gts) -> np.ndarray:
    out = np.zeros((len(preds), len(gts)))
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            out[i, j] = voxel_iou(p, g)
    return out


def score_order(scores) -> np.ndarray:
    """Indices by descending score; equal scores keep input order."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def greedy_match(preds, gts, iou_threshold, ious=None):
    """One-to-one matching of predictions to ground truth of a single class.

    Returns ``(is_tp, gt_to_pred)``: a boolean per prediction (input order)
    and, per GT, the index of its matched prediction or -1.
    """
    if ious is None:
        ious = iou_matrix(preds, gts)
    is_tp = np.zeros(len(preds), dtype=bool)
    gt_to_pred = np.full(len(gts), -1, dtype=np.int64)
    if len(gts) == 0:
        return is_tp, gt_to_pred
    for i in score_order([p.score for p in preds]):
        cand = np.where(gt_to_pred < 0, ious[i], -1.0)
        j = int(np.argmax(cand))  # first max -> lowest GT index on ties
        if cand[j] >= iou_threshold:
            gt_to_pred[j] = i
            is_tp[i] = True
    return is_tp, gt_to_pred


def average_precision(labels, gt_count) -> float:
    """All-point interpolated AP for a score-ordered TP(True)/FP(False) sequence."""
    labels = np.asarray(labels, dtype=bool)
    if gt_count == 0:
        return 0.0 if labels.size else 1.0
    if labels.size == 0:
        return 0.0
    tp = np.cumsum(labels)
    fp = np.cumsum(~labels)
    recall = tp / gt_count
    precision = tp / (tp + fp)
    # monotone envelope, then area over recall steps
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate(([0.0], recall)))
    return float(np.sum(steps * envelope))


def average_map(map_at: Sequence[float]) -> float:
    """Mean of the per-threshold mAPs."""
    return float(np.mean(np.asarray(map_at, dtype=np.float64)))


@dataclass
class EvalReport:
    thresholds: Tuple[float, ...]
    per_class_ap: Dict[int, Tuple[float, ...]]
    map_at: Tuple[float, ...]
    map_occ: float
    miou: float = float("nan")
    per_class_iou: Dict[int, float] = field(default_factory=dict)
    class_names: Optional[Sequence[str]] = None

    def _name(self, c):
        if self.class_names is not None and 0 <= c < len(self.class_names):
            return self.class_names[c]
        return str(c)

    def to_dict(self) -> dict:
        return {
            "thresholds": list(self.thresholds),
            "map_at": list(self.map_at),
            "map_occ": self.map_occ,
            "miou": self.miou,
            "per_class_ap": {str(c): list(v) for c, v in sorted(self.per_class_ap.items())},
            "per_class_iou": {str(c): v for c, v in sorted(self.per_class_iou.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        pct = lambda v: f"{100.0 * v:.2f}"
        lines = [f"map_occ: {pct(self.map_occ)}"]
        for t, m in zip(self.thresholds, self.map_at):
            lines.append(f"map@{t:g}: {pct(m)}")
        lines.append(f"miou: {pct(self.miou)}")
        for c, aps in sorted(self.per_class_ap.items()):
            vals = " ".join(pct(a) for a in aps)
            lines.append(f"ap[{self._name(c)}]: {vals}")
        for c, v in sorted(self.per_class_iou.items()):
            lines.append(f"iou[{self._name(c)}]: {pct(v)}")
        return "\n".join(lines) + "\n"


def _pooled_labels(preds_by_frame: Frames, gts_by_frame: Frames, cls, thresholds):
    """Scores and per-threshold TP labels for one class, pooled over frames."""
    scores: List[float] = []
    labels: List[List[np.ndarray]] = [[] for _ in thresholds]
    gt_count = 0
    for preds, gts in zip(preds_by_frame, gts_by_frame):
        p = [x for x in preds if x.class_id == cls]
        g = [x for x in gts if x.class_id == cls]
        gt_count += len(g)
        scores.extend(x.score for x in p)
        ious = iou_matrix(p, g)
        for t_i, t in enumerate(thresholds):
            labels[t_i].append(greedy_match(p, g, t, ious)[0])
    order = score_order(scores)
    return [np.concatenate(l)[order] if l else np.zeros(0, bool) for l in labels], gt_count


def map_occ(preds_by_frame: Frames, gts_by_frame: Frames,
            thresholds=DEFAULT_IOU_THRESHOLDS, grid=None) -> EvalReport:
    """Instance-occupancy mAP report; fills ``miou`` too when frames are non-empty."""
    if len(preds_by_frame) != len(gts_by_frame):
        raise ValueError(f"{len(preds_by_frame)} prediction frames vs {len(gts_by_frame)} GT frames")
    thresholds = tuple(float(t) for t in thresholds)
    gt_classes = sorted({g.class_id for frame in gts_by_frame for g in frame})
    if not gt_classes:
        raise EmptyGroundTruth("no ground-truth instance in any frame")
    per_class = {}
    for c in gt_classes:
        labels, n_gt = _pooled_labels(preds_by_frame, gts_by_frame, c, thresholds)
        per_class[c] = tuple(average_precision(l, n_gt) for l in labels)
    map_at = tuple(float(np.mean([per_class[c][i] for c in gt_classes]))
                   for i in range(len(thresholds)))
    miou, per_class_iou = semantic_miou(preds_by_frame, gts_by_frame, grid)
    return EvalReport(thresholds, per_class, map_at, average_map(map_at), miou, per_class_iou)


def semantic_labels(instances: Sequence[SparseInstanceOccupancy]):
    """Collapse instances to one class per voxel.

    Overlaps go to the highest score, then the lower class id, then the
    earlier instance. Returns ``(voxels, classes)`` sorted by voxel.
    """
    if not instances:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    vox = np.concatenate([x.voxels for x in instances])
    n = [len(x) for x in instances]
    cls = np.repeat([x.class_id for x in instances], n)
    score = np.repeat([x.score for x in instances], n)
    inst = np.repeat(np.arange(len(instances)), n)
    order = np.lexsort((inst, cls, -score, vox))
    vox, cls = vox[order], cls[order]
    first = np.ones(vox.size, dtype=bool)
    first[1:] = vox[1:] != vox[:-1]
    return vox[first], cls[first]


def _frame_grid(frame):
    grids = {x.grid for x in frame if x.grid is not None}
    if len(grids) > 1:
        raise GridMismatch("instances in one frame use different grids")
    return grids.pop() if grids else None


def semantic_miou(preds_by_frame: Frames, gts_by_frame: Frames, grid=None):
    """Global per-class IoU of class-aggregated occupancy, averaged over GT classes."""
    inter: Dict[int, int] = {}
    union: Dict[int, int] = {}
    gt_classes = set()
    for preds, gts in zip(preds_by_frame, gts_by_frame):
        for g in (_frame_grid(preds), _frame_grid(gts)):
            _check_grids(grid, g)
            grid = grid if grid is not None else g
        pv, pc = semantic_labels(preds)
        gv, gc = semantic_labels(gts)
        gt_classes.update(int(c) for c in np.unique(gc))
        _, pi, gi = np.intersect1d(pv, gv, assume_unique=True, return_indices=True)
        agree = pc[pi] == gc[gi]
        for c in np.union1d(np.unique(pc), np.unique(gc)):
            c = int(c)
            i = int(np.count_nonzero(agree & (pc[pi] == c)))
            u = int(np.count_nonzero(pc == c) + np.count_nonzero(gc == c)) - i
            inter[c] = inter.get(c, 0) + i
            union[c] = union.get(c, 0) + u
    per_class = {c: inter[c] / union[c] for c in sorted(gt_classes)}
    miou = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return miou, per_class
