"""Scene (JSON Lines) and occupancy (GOCC binary) formats, synthetic data, PLY export.

Scene file, one JSON object per line::

    {"type":"header","grid":{"min":[..],"max":[..],"voxel_size":[..]},"classes":[..],"k":K}
    {"type":"frame","t":0.0,"instances":[{"class":0,"score":0.9,"anchor":[10 floats],
        "track_id":null,"gaussians":[[dx,dy,dz,sx,sy,sz,qw,qx,qy,qz], ...]}]}

GOCC block, little endian::

    b"GOCC" | u32 version=1 | 6 x f64 min/max corners | 3 x f64 voxel size
    | 3 x u32 dims | u32 instance count
    | per instance: i64 track id (-1 none) | u16 class | f32 score | u32 count | count x u32 index

A multi-frame occupancy file is a plain concatenation of GOCC blocks, one per
frame; a single-frame file is exactly one block.
"""

from __future__ import annotations

import io as _stdio
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, List, Optional, Sequence, Tuple

import numpy as np

from .core import (
    Gaussian3D,
    InstanceAnchor,
    InstancePrediction,
    SparseInstanceOccupancy,
    VoxelGridSpec,
)
from .errors import (
    BadMagic,
    ConfigInvalid,
    DimsInconsistent,
    IndicesNotAscending,
    InvariantViolation,
    ParseError,
    VersionUnsupported,
)

MAGIC = b"GOCC"
VERSION = 1
_HEAD = struct.Struct("<4sI6d3d3II")
_INST = struct.Struct("<qHfI")

DEFAULT_CLASSES = (
    "car", "truck", "trailer", "bus", "construction_vehicle",
    "bicycle", "motorcycle", "pedestrian", "traffic_cone", "barrier",
)


@dataclass
class Frame:
    t: float
    instances: List[InstancePrediction] = field(default_factory=list)


@dataclass
class SceneFile:
    grid: VoxelGridSpec
    classes: List[str]
    k: int
    frames: List[Frame] = field(default_factory=list)


@dataclass
class OccFile:
    grid: VoxelGridSpec
    instances: List[SparseInstanceOccupancy] = field(default_factory=list)


# ---------------------------------------------------------------------------
# JSON Lines scenes

def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def _instance_record(inst: InstancePrediction) -> dict:
    return {
        "class": inst.class_id,
        "score": inst.score,
        "anchor": inst.anchor.to_vector(),
        "track_id": inst.track_id,
        "gaussians": [g.to_row() for g in inst.gaussians],
    }


def scene_lines(scene: SceneFile):
    yield _dumps({"type": "header", "grid": scene.grid.to_dict(),
                  "classes": list(scene.classes), "k": scene.k})
    for fr in scene.frames:
        yield _dumps({"type": "frame", "t": fr.t,
                      "instances": [_instance_record(i) for i in fr.instances]})


def write_scene(scene: SceneFile, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for line in scene_lines(scene):
            f.write(line + "\n")


def _numbers(value, n, what, lineno):
    if not isinstance(value, list) or len(value) != n:
        got = len(value) if isinstance(value, list) else type(value).__name__
        raise ParseError(f"{what}: expected a list of {n} numbers, got {got}", lineno)
    for v in value:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ParseError(f"{what}: non-numeric entry {v!r}", lineno)
    return value


def _parse_grid(obj, lineno) -> VoxelGridSpec:
    if not isinstance(obj, dict):
        raise ParseError("header.grid must be an object", lineno)
    try:
        return VoxelGridSpec(_numbers(obj.get("min"), 3, "grid.min", lineno),
                             _numbers(obj.get("max"), 3, "grid.max", lineno),
                             _numbers(obj.get("voxel_size"), 3, "grid.voxel_size", lineno))
    except InvariantViolation as e:
        raise InvariantViolation(e.field, f"line {lineno}: {e}") from None


def _parse_instance(rec, lineno, idx, k) -> InstancePrediction:
    where = f"instances[{idx}]"
    if not isinstance(rec, dict):
        raise ParseError(f"{where} must be an object", lineno)
    missing = {"class", "score", "anchor", "gaussians"} - rec.keys()
    if missing:
        raise ParseError(f"{where} missing {sorted(missing)}", lineno)
    anchor = _numbers(rec["anchor"], 10, f"{where}.anchor", lineno)
    gaussians = rec["gaussians"]
    if not isinstance(gaussians, list):
        raise ParseError(f"{where}.gaussians must be a list", lineno)
    rows = [_numbers(g, 10, f"{where}.gaussians[{j}]", lineno) for j, g in enumerate(gaussians)]
    if k is not None and len(rows) != k:
        raise InvariantViolation(f"{where}.gaussians", f"line {lineno}: {len(rows)} Gaussians, header says k={k}")
    cls, tid = rec["class"], rec.get("track_id")
    if isinstance(cls, bool) or not isinstance(cls, int):
        raise ParseError(f"{where}.class must be an integer", lineno)
    if tid is not None and (isinstance(tid, bool) or not isinstance(tid, int)):
        raise ParseError(f"{where}.track_id must be an integer or null", lineno)
    if isinstance(rec["score"], bool) or not isinstance(rec["score"], (int, float)):
        raise ParseError(f"{where}.score must be a number", lineno)
    try:
        return InstancePrediction(cls, rec["score"], InstanceAnchor.from_vector(anchor),
                                  tuple(Gaussian3D.from_row(r) for r in rows), tid)
    except InvariantViolation as e:
        raise InvariantViolation(f"{where}.{e.field}", f"line {lineno}: {e}") from None


def parse_scene(lines) -> SceneFile:
    scene = None
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise ParseError(f"invalid JSON ({e.msg})", lineno) from None
        if not isinstance(rec, dict):
            raise ParseError("record must be a JSON object", lineno)
        kind = rec.get("type")
        if scene is None:
            if kind != "header":
                raise ParseError("first record must be the header", lineno)
            k = rec.get("k")
            classes = rec.get("classes", [])
            if isinstance(k, bool) or not isinstance(k, int) or k < 1:
                raise ParseError("header.k must be a positive integer", lineno)
            if not isinstance(classes, list) or not all(isinstance(c, str) for c in classes):
                raise ParseError("header.classes must be a list of strings", lineno)
            scene = SceneFile(_parse_grid(rec.get("grid"), lineno), classes, k)
        elif kind == "frame":
            insts = rec.get("instances")
            t = rec.get("t", 0.0)
            if not isinstance(insts, list):
                raise ParseError("frame.instances must be a list", lineno)
            if isinstance(t, bool) or not isinstance(t, (int, float)):
                raise ParseError("frame.t must be a number", lineno)
            scene.frames.append(Frame(t, [_parse_instance(r, lineno, i, scene.k)
                                          for i, r in enumerate(insts)]))
        else:
            raise ParseError(f"unexpected record type {kind!r}", lineno)
    if scene is None:
        raise ParseError("missing header record", 1)
    return scene


def read_scene(path) -> SceneFile:
    with open(path, "r", encoding="utf-8") as f:
        return parse_scene(f)


# ---------------------------------------------------------------------------
# GOCC binary occupancy

def _write_block(f: BinaryIO, occ: OccFile):
    g = occ.grid
    f.write(_HEAD.pack(MAGIC, VERSION, *g.min_corner, *g.max_corner, *g.voxel_size,
                       *g.dims, len(occ.instances)))
    for inst in occ.instances:
        if inst.grid is not None and inst.grid != g:
            raise InvariantViolation("grid", "instance grid differs from file grid")
        tid = -1 if inst.track_id is None else inst.track_id
        f.write(_INST.pack(tid, inst.class_id, inst.score, len(inst)))
        f.write(np.asarray(inst.voxels, dtype="<u4").tobytes())


def encode_occ(occ: OccFile) -> bytes:
    buf = _stdio.BytesIO()
    _write_block(buf, occ)
    return buf.getvalue()


def write_occ(occ: OccFile, path):
    with open(path, "wb") as f:
        _write_block(f, occ)


def write_occ_frames(frames: Sequence[OccFile], path):
    with open(path, "wb") as f:
        for occ in frames:
            _write_block(f, occ)


def _read_exact(data: memoryview, pos, n, what):
    if pos + n > len(data):
        raise ParseError(f"truncated file while reading {what} at byte {pos}")
    return data[pos:pos + n], pos + n


def _decode_block(data: memoryview, pos) -> Tuple[OccFile, int]:
    start = pos
    if bytes(data[pos:pos + 4]) != MAGIC and len(data) - pos >= 4:
        raise BadMagic(f"bad magic {bytes(data[pos:pos + 4])!r} at byte {pos}")
    raw, pos = _read_exact(data, pos, _HEAD.size, "header")
    fields = _HEAD.unpack(raw)
    magic, version = fields[0], fields[1]
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r} at byte {start}")
    if version != VERSION:
        raise VersionUnsupported(f"version {version} (supported: {VERSION})")
    lo, hi, vs, dims, count = fields[2:5], fields[5:8], fields[8:11], fields[11:14], fields[14]
    try:
        grid = VoxelGridSpec(lo, hi, vs)
    except InvariantViolation as e:
        raise DimsInconsistent(f"invalid grid in header: {e}") from None
    if tuple(dims) != grid.dims:
        raise DimsInconsistent(f"stored dims {tuple(dims)} but corners/sizes give {grid.dims}")
    instances = []
    for n in range(count):
        raw, pos = _read_exact(data, pos, _INST.size, f"instance {n}")
        tid, cls, score, nvox = _INST.unpack(raw)
        raw, pos = _read_exact(data, pos, 4 * nvox, f"instance {n} voxels")
        vox = np.frombuffer(raw, dtype="<u4").astype(np.int64)
        if vox.size > 1 and not np.all(vox[1:] > vox[:-1]):
            raise IndicesNotAscending(f"instance {n}: voxel indices not strictly ascending")
        if vox.size and vox[-1] >= grid.n_voxels:
            raise InvariantViolation(f"instance {n}.voxels", f"index {int(vox[-1])} outside grid")
        if tid < -1:
            raise InvariantViolation(f"instance {n}.track_id", f"invalid value {tid}")
        instances.append(SparseInstanceOccupancy(cls, score, vox, None if tid == -1 else tid, grid))
    return OccFile(grid, instances), pos


def decode_occ_frames(data: bytes) -> List[OccFile]:
    view = memoryview(data)
    frames, pos = [], 0
    if not data:
        raise ParseError("empty occupancy file")
    while pos < len(view):
        occ, pos = _decode_block(view, pos)
        frames.append(occ)
    return frames


def read_occ_frames(path) -> List[OccFile]:
    return decode_occ_frames(Path(path).read_bytes())


def read_occ(path) -> OccFile:
    frames = read_occ_frames(path)
    if len(frames) != 1:
        raise ParseError(f"expected a single occupancy block, found {len(frames)}")
    return frames[0]


# ---------------------------------------------------------------------------
# synthetic scenes

@dataclass(frozen=True)
class MotionConfig:
    frame_dt: float = 0.5
    max_speed: float = 3.0
    extent_range: Tuple[float, float] = (1.0, 4.0)
    height_range: Tuple[float, float] = (1.0, 2.0)


def _random_quat(rng) -> Tuple[float, ...]:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    return tuple(float(v) for v in q)


def _sample_track(rng, grid: VoxelGridSpec, k, n_frames, motion: MotionConfig):
    lo, hi = np.asarray(grid.min_corner), np.asarray(grid.max_corner)
    vmin = max(grid.voxel_size)
    extent = np.array([rng.uniform(*motion.extent_range), rng.uniform(*motion.extent_range),
                       rng.uniform(*motion.height_range)])
    extent = np.minimum(extent, 0.5 * (hi - lo))
    yaw = rng.uniform(-math.pi, math.pi)
    speed = rng.uniform(0.0, motion.max_speed)
    heading = yaw if rng.random() < 0.8 else rng.uniform(-math.pi, math.pi)
    vel = speed * np.array([math.cos(heading), math.sin(heading)])
    travel = np.abs(vel) * motion.frame_dt * max(n_frames - 1, 0)
    margin = 0.5 * extent.max()
    start_lo = lo + margin
    start_hi = hi - margin
    start_hi[:2] -= travel
    if np.any(start_hi <= start_lo):
        vel[:] = 0.0
        start_hi = hi - margin
    center = rng.uniform(start_lo, start_hi)
    # moving in -x/-y: start from the mirrored side so the whole path stays inside
    for a in range(2):
        if vel[a] < 0:
            center[a] += travel[a]
    c, s = math.cos(yaw), math.sin(yaw)
    rot_yaw = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    gaussians = []
    for _ in range(k):
        local = rng.uniform(-0.5, 0.5, size=3) * extent
        offset = rot_yaw @ local
        scale = rng.uniform(0.75 * vmin, max(0.75 * vmin, 0.35 * extent.min()) + 0.25 * vmin, size=3)
        gaussians.append(Gaussian3D.create(offset, scale, _random_quat(rng)))
    return center, extent, yaw, vel, tuple(gaussians)


def gen_synthetic(seed, n_frames, n_instances, k, grid: VoxelGridSpec,
                  motion: MotionConfig = MotionConfig(), classes=DEFAULT_CLASSES,
                  splat_config=None):
    """Deterministic synthetic sequence and its ground-truth occupancy.

    Returns ``(scene, gt_frames)``. Every instance keeps one GT track ID
    (its index) across frames and moves at constant velocity. GT occupancy
    comes from the dense oracle so it agrees with the splatting model.
    Instances whose occupancy would be empty in some frame are resampled.
    """
    from .splat import SplatConfig, dense_oracle_splat

    if n_frames < 0 or n_instances < 0 or k < 1:
        raise ConfigInvalid("n_frames and n_instances must be >= 0, k >= 1")
    if motion.frame_dt < 0 or motion.max_speed < 0:
        raise ConfigInvalid("motion parameters must be non-negative")
    cfg = splat_config or SplatConfig()
    rng = np.random.default_rng(seed)
    tracks = []
    occupancy = []
    for tid in range(n_instances):
        for _attempt in range(100):
            center, extent, yaw, vel, gaussians = _sample_track(rng, grid, k, n_frames, motion)
            cls = int(rng.integers(len(classes)))
            insts, occs = [], []
            for f in range(n_frames):
                c = center.copy()
                c[:2] += vel * motion.frame_dt * f
                anchor = InstanceAnchor.from_yaw(c, extent, yaw, vel)
                inst = InstancePrediction(cls, 1.0, anchor, gaussians, tid)
                insts.append(inst)
                occs.append(dense_oracle_splat(inst, grid, cfg))
            if all(len(o) for o in occs):
                break
        else:
            raise ConfigInvalid("could not place an instance with non-empty occupancy; grid too coarse?")
        tracks.append(insts)
        occupancy.append(occs)
    frames = [Frame(f * motion.frame_dt, [tr[f] for tr in tracks]) for f in range(n_frames)]
    gt = [OccFile(grid, [occ[f] for occ in occupancy]) for f in range(n_frames)]
    return SceneFile(grid, list(classes), k, frames), gt


def perturb_scene(scene: SceneFile, seed, position_noise=0.2, drop_rate=0.1,
                  false_positives=1, score_range=(0.3, 1.0)) -> SceneFile:
    """Noisy detections derived from a GT scene, for demos and benchmarks.

    Track IDs are cleared; scores are random.
    """
    rng = np.random.default_rng(seed)
    frames = []
    for fr in scene.frames:
        out = []
        for inst in fr.instances:
            if rng.random() < drop_rate:
                continue
            a = inst.anchor
            c = np.asarray(a.center) + rng.normal(scale=position_noise, size=3)
            anchor = InstanceAnchor(c, a.extent, a.yaw_sin, a.yaw_cos, a.velocity)
            out.append(inst.replace(anchor=anchor, score=float(rng.uniform(*score_range)), track_id=None))
        for _ in range(false_positives if fr.instances else 0):
            src = fr.instances[int(rng.integers(len(fr.instances)))]
            c = np.asarray(src.anchor.center) + rng.uniform(-5, 5, size=3) * (1, 1, 0)
            anchor = InstanceAnchor(c, src.anchor.extent, src.anchor.yaw_sin, src.anchor.yaw_cos)
            out.append(src.replace(anchor=anchor, score=float(rng.uniform(0.0, 0.5)), track_id=None))
        frames.append(Frame(fr.t, out))
    return SceneFile(scene.grid, list(scene.classes), scene.k, frames)


# ---------------------------------------------------------------------------
# PLY export

_PALETTE = (
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
    (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212),
    (0, 128, 128), (220, 190, 255), (170, 110, 40), (128, 0, 0), (170, 255, 195),
    (128, 128, 0), (0, 0, 128), (128, 128, 128),
)


def instance_color(inst: SparseInstanceOccupancy, index, palette=_PALETTE):
    key = inst.track_id if inst.track_id is not None else index
    return palette[key % len(palette)]


def export_ply(occ: OccFile, path, palette=_PALETTE):
    """ASCII PLY, one coloured vertex per occupied voxel centre."""
    total = sum(len(i) for i in occ.instances)
    with open(path, "w", encoding="ascii", newline="\n") as f:
        f.write("ply\nformat ascii 1.0\ncomment instance occupancy voxels\n")
        f.write(f"element vertex {total}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        f.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        f.write("end_header\n")
        for n, inst in enumerate(occ.instances):
            if not len(inst):
                continue
            r, g, b = instance_color(inst, n, palette)
            ijk = occ.grid.unravel(inst.voxels)
            xyz = np.stack([occ.grid.centers_of(a, ijk[:, a]) for a in range(3)], axis=1)
            for x, y, z in xyz:
                f.write(f"{x:.4f} {y:.4f} {z:.4f} {r} {g} {b}\n")
