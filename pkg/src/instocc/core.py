"""Domain types and world <-> voxel coordinate algebra.

All types are frozen dataclasses holding plain tuples, so they are hashable
and safe to share between threads. Linear voxel indices are x-major:
``index = i * ny * nz + j * nz + k``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import DegenerateScale, InvariantViolation, OutOfRange

Vec3 = Tuple[float, float, float]

SCALE_FLOOR = 0.01
# Renormalise unit vectors only when they are measurably off; keeps
# serialisation roundtrips bit-stable for values that are already unit.
_RENORM_TOL = 1e-12
_UNIT_TOL = 1e-6
_GRID_REL_TOL = 1e-9

ANCHOR_DIM = 10
GAUSSIAN_DIM = 10


def _vec3(name, values) -> Vec3:
    try:
        vals = tuple(float(v) for v in values)
    except TypeError:
        raise InvariantViolation(name, "expected a 3-vector") from None
    if len(vals) != 3:
        raise InvariantViolation(name, f"expected 3 components, got {len(vals)}")
    if not all(math.isfinite(v) for v in vals):
        raise InvariantViolation(name, "non-finite component")
    return vals


def _unit(name, values, n):
    vals = tuple(float(v) for v in values)
    if len(vals) != n or not all(math.isfinite(v) for v in vals):
        raise InvariantViolation(name, f"expected {n} finite components")
    norm = math.sqrt(math.fsum(v * v for v in vals))
    if abs(norm - 1.0) > _UNIT_TOL:
        raise InvariantViolation(name, f"norm {norm!r} is not 1 within {_UNIT_TOL}")
    if abs(norm - 1.0) > _RENORM_TOL:
        vals = tuple(v / norm for v in vals)
    return vals


@dataclass(frozen=True)
class VoxelGridSpec:
    """Axis-aligned voxel grid with half-open cells ``[min, max)`` per axis."""

    min_corner: Vec3
    max_corner: Vec3
    voxel_size: Vec3
    dims: Tuple[int, int, int] = field(init=False)

    def __post_init__(self):
        lo = _vec3("grid.min_corner", self.min_corner)
        hi = _vec3("grid.max_corner", self.max_corner)
        vs = _vec3("grid.voxel_size", self.voxel_size)
        dims = []
        for a in range(3):
            if not hi[a] > lo[a]:
                raise InvariantViolation("grid.max_corner", f"axis {a}: max must exceed min")
            if not vs[a] > 0:
                raise InvariantViolation("grid.voxel_size", f"axis {a}: must be positive")
            cells = (hi[a] - lo[a]) / vs[a]
            n = int(math.floor(cells + 0.5))
            if n < 1 or abs(cells - n) > _GRID_REL_TOL * max(cells, 1.0):
                raise InvariantViolation(
                    "grid.voxel_size",
                    f"axis {a}: range {hi[a] - lo[a]!r} is not a multiple of {vs[a]!r}",
                )
            dims.append(n)
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)
        object.__setattr__(self, "voxel_size", vs)
        object.__setattr__(self, "dims", tuple(dims))

    @classmethod
    def occ3d(cls, voxel_size=0.4) -> "VoxelGridSpec":
        """The standard driving-scene grid: 80 m x 80 m x 6.4 m around the ego car."""
        return cls((-40.0, -40.0, -1.0), (40.0, 40.0, 5.4), (voxel_size,) * 3)

    def with_voxel_size(self, voxel_size) -> "VoxelGridSpec":
        """Same extent, new resolution. ``voxel_size`` may be a scalar or a 3-vector."""
        if np.ndim(voxel_size) == 0:
            voxel_size = (float(voxel_size),) * 3
        return VoxelGridSpec(self.min_corner, self.max_corner, tuple(voxel_size))

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def axis_centers(self, axis, start=0, stop=None) -> np.ndarray:
        """Voxel-centre coordinates along one axis for indices ``start:stop``."""
        if stop is None:
            stop = self.dims[axis]
        return self.centers_of(axis, np.arange(start, stop))

    def centers_of(self, axis, idx) -> np.ndarray:
        """Voxel-centre coordinates along one axis for an integer index array."""
        idx = np.asarray(idx, dtype=np.float64)
        return self.min_corner[axis] + (idx + 0.5) * self.voxel_size[axis]

    def ravel(self, ijk) -> np.ndarray:
        """Linear x-major indices for an ``(..., 3)`` integer array."""
        ijk = np.asarray(ijk, dtype=np.int64)
        _, ny, nz = self.dims
        return (ijk[..., 0] * ny + ijk[..., 1]) * nz + ijk[..., 2]

    def unravel(self, linear) -> np.ndarray:
        _, ny, nz = self.dims
        linear = np.asarray(linear, dtype=np.int64)
        return np.stack([linear // (ny * nz), (linear // nz) % ny, linear % nz], axis=-1)

    def to_dict(self) -> dict:
        return {
            "min": list(self.min_corner),
            "max": list(self.max_corner),
            "voxel_size": list(self.voxel_size),
        }


def world_to_voxel(p, grid: VoxelGridSpec) -> Tuple[int, int, int]:
    """Index of the voxel containing ``p``; points on a max face are outside."""
    p = _vec3("p", p)
    out = []
    for a in range(3):
        lo, hi = grid.min_corner[a], grid.max_corner[a]
        if not lo <= p[a] < hi:
            raise OutOfRange(f"coordinate {p[a]!r} on axis {a} outside [{lo}, {hi})")
        i = int(math.floor((p[a] - lo) / grid.voxel_size[a]))
        # p < max but the division rounded up to dims
        out.append(min(i, grid.dims[a] - 1))
    return tuple(out)


def voxel_center(index, grid: VoxelGridSpec) -> Vec3:
    if len(index) != 3:
        raise OutOfRange("voxel index must have 3 components")
    out = []
    for a in range(3):
        i = int(index[a])
        if not 0 <= i < grid.dims[a]:
            raise OutOfRange(f"index {i} on axis {a} outside [0, {grid.dims[a]})")
        out.append(grid.min_corner[a] + (i + 0.5) * grid.voxel_size[a])
    return tuple(out)


@dataclass(frozen=True)
class Gaussian3D:
    """One occupancy primitive, positioned relative to its instance centre.

    Scales below ``scale_floor`` are clamped up unless ``clamp=False`` is
    passed to :meth:`create`, in which case they raise ``DegenerateScale``.
    Rotation is a unit quaternion ``(w, x, y, z)``.
    """

    offset: Vec3
    scale: Vec3
    rotation: Tuple[float, float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "offset", _vec3("gaussian.offset", self.offset))
        scale = _vec3("gaussian.scale", self.scale)
        if min(scale) < SCALE_FLOOR:
            raise DegenerateScale("gaussian.scale", f"{scale} below floor {SCALE_FLOOR}")
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "rotation", _unit("gaussian.rotation", self.rotation, 4))

    @classmethod
    def create(cls, offset, scale, rotation=(1.0, 0.0, 0.0, 0.0), *,
               scale_floor=SCALE_FLOOR, clamp=True) -> "Gaussian3D":
        scale = _vec3("gaussian.scale", scale)
        if scale_floor < SCALE_FLOOR:
            raise InvariantViolation("scale_floor", f"must be >= {SCALE_FLOOR}")
        if clamp:
            scale = tuple(max(s, scale_floor) for s in scale)
        elif min(scale) < scale_floor:
            raise DegenerateScale("gaussian.scale", f"{scale} below floor {scale_floor}")
        return cls(offset, scale, rotation)

    @classmethod
    def from_row(cls, row: Sequence[float]) -> "Gaussian3D":
        """``[dx, dy, dz, sx, sy, sz, qw, qx, qy, qz]``"""
        if len(row) != GAUSSIAN_DIM:
            raise InvariantViolation("gaussian", f"expected {GAUSSIAN_DIM} values, got {len(row)}")
        return cls.create(row[0:3], row[3:6], row[6:10])

    def to_row(self) -> list:
        return [*self.offset, *self.scale, *self.rotation]


@dataclass(frozen=True)
class InstanceAnchor:
    """Box pose record: centre, extent (w, l, h), heading as (sin, cos), planar velocity."""

    center: Vec3
    extent: Vec3
    yaw_sin: float
    yaw_cos: float
    velocity: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "center", _vec3("anchor.center", self.center))
        extent = _vec3("anchor.extent", self.extent)
        if min(extent) <= 0:
            raise InvariantViolation("anchor.extent", f"{extent} must be strictly positive")
        object.__setattr__(self, "extent", extent)
        s, c = _unit("anchor.yaw", (self.yaw_sin, self.yaw_cos), 2)
        object.__setattr__(self, "yaw_sin", s)
        object.__setattr__(self, "yaw_cos", c)
        vel = tuple(float(v) for v in self.velocity)
        if len(vel) != 2 or not all(math.isfinite(v) for v in vel):
            raise InvariantViolation("anchor.velocity", "expected 2 finite components")
        object.__setattr__(self, "velocity", vel)

    @classmethod
    def from_yaw(cls, center, extent, yaw, velocity=(0.0, 0.0)) -> "InstanceAnchor":
        return cls(center, extent, math.sin(yaw), math.cos(yaw), velocity)

    @classmethod
    def from_vector(cls, vec: Sequence[float]) -> "InstanceAnchor":
        """Inverse of :meth:`to_vector`."""
        if len(vec) != ANCHOR_DIM:
            raise InvariantViolation("anchor", f"expected {ANCHOR_DIM} values, got {len(vec)}")
        return cls(vec[0:3], vec[3:6], vec[6], vec[7], vec[8:10])

    def to_vector(self) -> list:
        return [*self.center, *self.extent, self.yaw_sin, self.yaw_cos, *self.velocity]

    @property
    def yaw(self) -> float:
        return math.atan2(self.yaw_sin, self.yaw_cos)


@dataclass(frozen=True)
class InstancePrediction:
    class_id: int
    score: float
    anchor: InstanceAnchor
    gaussians: Tuple[Gaussian3D, ...]
    track_id: Optional[int] = None

    def __post_init__(self):
        if int(self.class_id) != self.class_id or self.class_id < 0:
            raise InvariantViolation("class", f"{self.class_id!r} is not a non-negative integer")
        object.__setattr__(self, "class_id", int(self.class_id))
        score = float(self.score)
        if not 0.0 <= score <= 1.0:
            raise InvariantViolation("score", f"{score!r} outside [0, 1]")
        object.__setattr__(self, "score", score)
        gaussians = tuple(self.gaussians)
        if not gaussians:
            raise InvariantViolation("gaussians", "an instance needs at least one Gaussian")
        object.__setattr__(self, "gaussians", gaussians)
        if self.track_id is not None:
            if int(self.track_id) != self.track_id or self.track_id < 0:
                raise InvariantViolation("track_id", f"{self.track_id!r} is not a non-negative integer")
            object.__setattr__(self, "track_id", int(self.track_id))

    @property
    def k(self) -> int:
        return len(self.gaussians)

    @cached_property
    def gaussian_arrays(self):
        """``(means, scales, quats)`` as float64 arrays of shape (K, 3), (K, 3), (K, 4).

        Means are in world coordinates (instance centre + offset).
        """
        offsets = np.array([g.offset for g in self.gaussians], dtype=np.float64)
        scales = np.array([g.scale for g in self.gaussians], dtype=np.float64)
        quats = np.array([g.rotation for g in self.gaussians], dtype=np.float64)
        means = np.asarray(self.anchor.center, dtype=np.float64) + offsets
        return means, scales, quats

    def replace(self, **changes) -> "InstancePrediction":
        fields = dict(class_id=self.class_id, score=self.score, anchor=self.anchor,
                      gaussians=self.gaussians, track_id=self.track_id)
        fields.update(changes)
        return InstancePrediction(**fields)


@dataclass(frozen=True, eq=False)
class SparseInstanceOccupancy:
    """Voxel set of one instance as strictly ascending linear indices."""

    class_id: int
    score: float
    voxels: np.ndarray
    track_id: Optional[int] = None
    grid: Optional[VoxelGridSpec] = None

    def __post_init__(self):
        vox = np.asarray(self.voxels, dtype=np.int64).reshape(-1)
        if vox.size:
            if vox[0] < 0:
                raise InvariantViolation("voxels", "negative linear index")
            if self.grid is not None and vox[-1] >= self.grid.n_voxels:
                raise InvariantViolation("voxels", f"index {int(vox[-1])} >= {self.grid.n_voxels}")
            if vox.size > 1 and not np.all(vox[1:] > vox[:-1]):
                raise InvariantViolation("voxels", "indices must be strictly ascending")
        vox.setflags(write=False)
        object.__setattr__(self, "voxels", vox)
        object.__setattr__(self, "class_id", int(self.class_id))
        object.__setattr__(self, "score", float(self.score))
        if self.track_id is not None:
            object.__setattr__(self, "track_id", int(self.track_id))

    def __len__(self):
        return int(self.voxels.size)

    def __eq__(self, other):
        if not isinstance(other, SparseInstanceOccupancy):
            return NotImplemented
        return (self.class_id == other.class_id and self.score == other.score
                and self.track_id == other.track_id and self.grid == other.grid
                and np.array_equal(self.voxels, other.voxels))

    __hash__ = None
