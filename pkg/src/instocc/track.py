"""Cross-frame instance bank with confidence-gated ID assignment.

The bank keeps anchors and scores of recent instances. Each step propagates
the bank forward at constant velocity, associates detections to entries of
the same class by centre distance, and hands out a fresh track ID to every
entry whose score reaches ``t_track`` (inclusive) and has none yet. IDs are
never reused within a sequence.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import InstanceAnchor, InstancePrediction, SparseInstanceOccupancy
from .errors import ConfigInvalid
from .metrics import greedy_match, iou_matrix
from .supervision import hungarian


@dataclass(frozen=True)
class TrackBankConfig:
    t_track: float = 0.2
    top_k: int = 300
    max_age: int = 4
    gate_radius: float = 4.0
    frame_dt: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.t_track < 1.0:
            raise ConfigInvalid(f"t_track must be in (0, 1), got {self.t_track}")
        if self.top_k < 1:
            raise ConfigInvalid("top_k must be positive")
        if self.max_age < 0:
            raise ConfigInvalid("max_age must be non-negative")
        if not self.gate_radius > 0:
            raise ConfigInvalid("gate_radius must be positive")
        if not self.frame_dt >= 0:
            raise ConfigInvalid("frame_dt must be non-negative")


@dataclass(frozen=True)
class TrackEntry:
    track_id: Optional[int]
    class_id: int
    anchor: InstanceAnchor
    score: float
    age: int = 0


@dataclass(frozen=True)
class TrackBank:
    entries: Tuple[TrackEntry, ...] = ()
    next_id: int = 0
    config: TrackBankConfig = field(default_factory=TrackBankConfig)

    def __len__(self):
        return len(self.entries)


def propagate_anchor(a: InstanceAnchor, dt: float) -> InstanceAnchor:
    """Constant-velocity step in the ground plane."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    if dt == 0 or a.velocity == (0.0, 0.0):
        return a
    x, y, z = a.center
    vx, vy = a.velocity
    return replace(a, center=(x + vx * dt, y + vy * dt, z))


_GATED = 1e9


def _associate(entries: Sequence[TrackEntry], dets: Sequence[InstancePrediction], gate):
    """Map detection index -> entry index, class-partitioned, gated by centre distance."""
    matches: Dict[int, int] = {}
    for cls in sorted({d.class_id for d in dets}):
        di = [i for i, d in enumerate(dets) if d.class_id == cls]
        ei = [j for j, e in enumerate(entries) if e.class_id == cls]
        if not ei:
            continue
        dc = np.array([dets[i].anchor.center for i in di])
        ec = np.array([entries[j].anchor.center for j in ei])
        dist = np.linalg.norm(dc[:, None, :] - ec[None, :, :], axis=-1)
        cost = np.where(dist <= gate, dist, _GATED)
        for r, c in hungarian(cost):
            if dist[r, c] <= gate:
                matches[di[r]] = ei[c]
    return matches


def bank_step(bank: TrackBank, detections: Sequence[InstancePrediction]):
    """Advance the bank by one frame.

    Returns ``(new_bank, annotated)`` where ``annotated`` are the detections,
    in input order, carrying the track ID of their bank entry (or None).
    """
    cfg = bank.config
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    dets = [detections[i] for i in order]

    entries = [replace(e, anchor=propagate_anchor(e.anchor, cfg.frame_dt)) for e in bank.entries]
    matches = _associate(entries, dets, cfg.gate_radius)

    next_id = bank.next_id
    updated: List[TrackEntry] = []
    det_ids: List[Optional[int]] = []
    for i, d in enumerate(dets):
        prev_id = entries[matches[i]].track_id if i in matches else None
        track_id = prev_id
        if track_id is None and d.score >= cfg.t_track:
            track_id = next_id
            next_id += 1
        updated.append(TrackEntry(track_id, d.class_id, d.anchor, d.score, 0))
        det_ids.append(track_id)

    matched = set(matches.values())
    for j, e in enumerate(entries):
        if j in matched:
            continue
        if e.age + 1 <= cfg.max_age:
            updated.append(replace(e, age=e.age + 1))

    keep = sorted(range(len(updated)), key=lambda i: -updated[i].score)[:cfg.top_k]
    new_entries = tuple(updated[i] for i in sorted(keep))

    annotated: List[Optional[InstancePrediction]] = [None] * len(detections)
    for pos, i in enumerate(order):
        annotated[i] = detections[i].replace(track_id=det_ids[pos])
    return TrackBank(new_entries, next_id, cfg), annotated


def run_sequence(frames: Sequence[Sequence[InstancePrediction]],
                 cfg: TrackBankConfig = TrackBankConfig()):
    """Run the bank over a whole sequence; returns annotated frames and the final bank."""
    bank = TrackBank(config=cfg)
    out = []
    for dets in frames:
        bank, annotated = bank_step(bank, dets)
        out.append(annotated)
    return out, bank


def count_id_switches(gt_frames: Sequence[Sequence[SparseInstanceOccupancy]],
                      pred_frames: Sequence[Sequence[SparseInstanceOccupancy]],
                      iou_threshold=0.5) -> int:
    """Identity switches of predicted track IDs along each ground-truth track.

    Per frame and class, GT is matched to ID-carrying predictions by voxel
    IoU. A GT track switches whenever its matched prediction's ID differs from
    the last ID it was matched to; missed frames neither count nor reset.
    """
    if len(gt_frames) != len(pred_frames):
        raise ValueError("frame counts differ")
    last: Dict[int, int] = {}
    switches = 0
    for gts, preds in zip(gt_frames, pred_frames):
        preds = [p for p in preds if p.track_id is not None]
        for cls in sorted({g.class_id for g in gts}):
            g = [x for x in gts if x.class_id == cls]
            p = [x for x in preds if x.class_id == cls]
            _, gt_to_pred = greedy_match(p, g, iou_threshold, iou_matrix(p, g))
            for gi, pi in enumerate(gt_to_pred):
                if pi < 0 or g[gi].track_id is None:
                    continue
                gid, pid = g[gi].track_id, p[pi].track_id
                if gid in last and last[gid] != pid:
                    switches += 1
                last[gid] = pid
    return switches
