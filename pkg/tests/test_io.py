import json
import struct

import numpy as np
import pytest

from instocc.core import SparseInstanceOccupancy, VoxelGridSpec
from instocc.errors import (
    BadMagic,
    DimsInconsistent,
    FormatError,
    IndicesNotAscending,
    InvariantViolation,
    ParseError,
    VersionUnsupported,
)
from instocc.io import (
    OccFile,
    SceneFile,
    decode_occ_frames,
    encode_occ,
    export_ply,
    gen_synthetic,
    parse_scene,
    perturb_scene,
    read_occ,
    read_occ_frames,
    read_scene,
    scene_lines,
    write_occ,
    write_occ_frames,
    write_scene,
)
from instocc.metrics import map_occ
from instocc.splat import splat_scene

from conftest import GOLDEN, small_grid

UNIT = VoxelGridSpec((0, 0, 0), (2, 2, 2), (1, 1, 1))


def test_golden_occ_decodes_to_known_values():
    occ = read_occ(GOLDEN / "occ_small.gocc")
    assert occ.grid == UNIT and occ.grid.dims == (2, 2, 2)
    a, b = occ.instances
    assert (a.track_id, a.class_id, a.score, a.voxels.tolist()) == (7, 3, 0.75, [0, 1, 5])
    assert (b.track_id, b.class_id, b.score, b.voxels.tolist()) == (None, 0, 0.5, [7])


def test_golden_occ_reencodes_byte_identically():
    raw = (GOLDEN / "occ_small.gocc").read_bytes()
    assert len(raw) == 96 + (18 + 12) + (18 + 4)
    assert encode_occ(read_occ(GOLDEN / "occ_small.gocc")) == raw


def test_empty_occ_size_and_roundtrip(tmp_path):
    data = encode_occ(OccFile(UNIT, []))
    assert len(data) == 96
    assert data[:4] == b"GOCC" and struct.unpack_from("<I", data, 4) == (1,)
    path = tmp_path / "e.gocc"
    write_occ(OccFile(UNIT, []), path)
    assert read_occ(path).instances == []


def _patched(offset, fmt, value):
    raw = bytearray((GOLDEN / "occ_small.gocc").read_bytes())
    struct.pack_into(fmt, raw, offset, value)
    return bytes(raw)


def test_occ_format_errors():
    with pytest.raises(BadMagic):
        decode_occ_frames(b"XOCC" + (GOLDEN / "occ_small.gocc").read_bytes()[4:])
    with pytest.raises(VersionUnsupported):
        decode_occ_frames(_patched(4, "<I", 2))
    with pytest.raises(DimsInconsistent):
        decode_occ_frames(_patched(4 + 4 + 72, "<I", 3))  # dims_x
    # second voxel index of instance 0 lowered below the first
    with pytest.raises(IndicesNotAscending):
        decode_occ_frames(_patched(96 + 18 + 4, "<I", 0))
    with pytest.raises(ParseError):
        decode_occ_frames((GOLDEN / "occ_small.gocc").read_bytes()[:-2])
    with pytest.raises(FormatError):
        decode_occ_frames(b"")


def test_occ_multi_frame_roundtrip(tmp_path):
    frames = [read_occ(GOLDEN / "occ_small.gocc"), OccFile(UNIT, [])]
    path = tmp_path / "m.gocc"
    write_occ_frames(frames, path)
    back = read_occ_frames(path)
    assert len(back) == 2 and len(back[0].instances) == 2 and back[1].instances == []
    with pytest.raises(ParseError):
        read_occ(path)


def test_occ_random_roundtrip(rng):
    grid = small_grid(0.4)
    for _ in range(20):
        insts = []
        for _ in range(int(rng.integers(0, 6))):
            vox = np.unique(rng.integers(0, grid.n_voxels, size=int(rng.integers(0, 50))))
            tid = None if rng.random() < 0.3 else int(rng.integers(0, 1000))
            insts.append(SparseInstanceOccupancy(int(rng.integers(0, 18)),
                                                 float(np.float32(rng.random())), vox, tid, grid))
        data = encode_occ(OccFile(grid, insts))
        (back,) = decode_occ_frames(data)
        assert back.instances == insts
        assert encode_occ(back) == data


def test_golden_scene_values():
    scene = read_scene(GOLDEN / "scene_small.jsonl")
    assert scene.grid.dims == (20, 20, 6)
    assert scene.classes == ["car", "pedestrian"] and scene.k == 2
    assert [f.t for f in scene.frames] == [0.0, 0.5]
    a, b = scene.frames[0].instances
    assert (a.class_id, a.score, a.track_id) == (0, 0.9, None)
    assert (b.class_id, b.score, b.track_id) == (1, 0.25, 3)
    assert (b.anchor.yaw_sin, b.anchor.yaw_cos) == (0.6, 0.8)
    assert a.gaussians[1].rotation[0] == 0.7071067811865476
    assert scene.frames[1].instances == []


def test_golden_scene_reencodes_byte_identically(tmp_path):
    text = (GOLDEN / "scene_small.jsonl").read_text()
    scene = parse_scene(text.splitlines())
    assert "\n".join(scene_lines(scene)) + "\n" == text
    path = tmp_path / "s.jsonl"
    write_scene(scene, path)
    assert path.read_text() == text


def test_header_only_scene():
    header = (GOLDEN / "scene_small.jsonl").read_text().splitlines()[0]
    assert parse_scene([header]).frames == []


def _golden_lines():
    return (GOLDEN / "scene_small.jsonl").read_text().splitlines()


def test_scene_parse_errors_carry_line_numbers():
    lines = _golden_lines()
    rec = json.loads(lines[1])
    rec["instances"][0]["gaussians"][1] = rec["instances"][0]["gaussians"][1][:9]
    with pytest.raises(ParseError) as err:
        parse_scene([lines[0], json.dumps(rec)])
    assert err.value.line == 2
    with pytest.raises(ParseError) as err:
        parse_scene([lines[0], lines[2], "{not json"])
    assert err.value.line == 3
    with pytest.raises(ParseError):
        parse_scene([])
    with pytest.raises(ParseError):
        parse_scene([lines[1]])


def test_scene_invariant_errors_name_the_field():
    lines = _golden_lines()
    rec = json.loads(lines[1])
    rec["instances"][0]["score"] = 1.5
    with pytest.raises(InvariantViolation, match="score"):
        parse_scene([lines[0], json.dumps(rec)])
    rec = json.loads(lines[1])
    rec["instances"][1]["anchor"][6:8] = [0.5, 0.5]
    with pytest.raises(InvariantViolation, match="yaw"):
        parse_scene([lines[0], json.dumps(rec)])


def test_synthetic_scene_roundtrip(tmp_path):
    scene, _ = gen_synthetic(5, 3, 4, 8, small_grid(0.8))
    path = tmp_path / "s.jsonl"
    write_scene(scene, path)
    back = read_scene(path)
    assert back == scene
    path2 = tmp_path / "s2.jsonl"
    write_scene(back, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_synthetic_is_deterministic(tmp_path):
    grid = small_grid(0.8)
    paths = []
    for n in range(2):
        scene, gt = gen_synthetic(11, 3, 3, 6, grid)
        write_scene(scene, tmp_path / f"s{n}.jsonl")
        write_occ_frames(gt, tmp_path / f"g{n}.gocc")
        paths.append((tmp_path / f"s{n}.jsonl", tmp_path / f"g{n}.gocc"))
    for a, b in zip(*paths):
        assert a.read_bytes() == b.read_bytes()
    other, _ = gen_synthetic(12, 3, 3, 6, grid)
    assert other != read_scene(paths[0][0])


def test_synthetic_properties():
    grid = small_grid(0.4)
    scene, gt = gen_synthetic(2, 4, 5, 12, grid)
    assert len(scene.frames) == len(gt) == 4
    for fr, occ in zip(scene.frames, gt):
        assert [i.track_id for i in fr.instances] == list(range(5))
        assert [o.track_id for o in occ.instances] == list(range(5))
        assert all(len(o) > 0 for o in occ.instances)
        for inst in fr.instances:
            assert all(lo <= c < hi for c, lo, hi in
                       zip(inst.anchor.center, grid.min_corner, grid.max_corner))
            # offsets live in the yaw-rotated box, so bound them by its half-diagonal
            half_diag = 0.5 * np.linalg.norm(inst.anchor.extent)
            assert all(np.linalg.norm(g.offset) <= half_diag + 1e-9 for g in inst.gaussians)
    # constant velocity between frames
    a0, a1, a2 = (scene.frames[f].instances[0].anchor for f in range(3))
    d1 = np.subtract(a1.center, a0.center)
    d2 = np.subtract(a2.center, a1.center)
    assert np.allclose(d1, d2) and np.allclose(d1[:2], np.multiply(a0.velocity, 0.5))


def test_synthetic_empty_scene():
    scene, gt = gen_synthetic(0, 2, 0, 4, small_grid(0.8))
    assert [f.instances for f in scene.frames] == [[], []]
    assert all(o.instances == [] for o in gt)


def test_synthetic_gt_self_evaluates_to_one():
    grid = small_grid(0.4)
    scene, gt = gen_synthetic(3, 2, 4, 8, grid)
    pred = [splat_scene(f.instances, grid) for f in scene.frames]
    report = map_occ(pred, [o.instances for o in gt])
    assert report.map_occ == 1.0 and report.miou == 1.0


def test_perturb_scene_clears_ids():
    scene, _ = gen_synthetic(3, 2, 3, 4, small_grid(0.8))
    noisy = perturb_scene(scene, 1)
    assert isinstance(noisy, SceneFile) and len(noisy.frames) == 2
    assert all(i.track_id is None for f in noisy.frames for i in f.instances)


def _ply_body(path):
    lines = path.read_text().splitlines()
    n = int(next(l for l in lines if l.startswith("element vertex")).split()[-1])
    body = lines[lines.index("end_header") + 1:]
    return n, body


def test_ply_export(tmp_path):
    occ = read_occ(GOLDEN / "occ_small.gocc")
    path = tmp_path / "o.ply"
    export_ply(occ, path)
    n, body = _ply_body(path)
    assert n == len(body) == 4
    first = body[0].split()
    assert [float(v) for v in first[:3]] == [0.5, 0.5, 0.5]
    colours = {tuple(l.split()[3:]) for l in body}
    assert len(colours) == 2
    export_ply(OccFile(UNIT, []), path)
    n, body = _ply_body(path)
    assert n == 0 and body == []
