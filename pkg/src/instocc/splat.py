"""Gaussian-to-voxel splatting.

Each Gaussian contributes ``p = exp(-d^2 / 2)`` at a voxel centre, where ``d``
is the Mahalanobis distance under ``Sigma = R S S^T R^T``. Contributions with
``d > cutoff`` are exactly zero. Per voxel the contributions are combined as
independent events, ``1 - prod(1 - p_i)``, accumulated as a sum of
``log(1 - p_i)`` in Gaussian order.

Two evaluators share the per-voxel arithmetic but not the spatial logic:

* :func:`splat_instance` visits only voxels inside each Gaussian's support box.
* :func:`dense_oracle_splat` visits every voxel of the grid for every Gaussian.

Both add the log terms Gaussian by Gaussian (an absent contribution adds an
exact 0.0), so they produce bit-identical probabilities and identical sets.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .core import (
    SCALE_FLOOR,
    Gaussian3D,
    InstancePrediction,
    SparseInstanceOccupancy,
    VoxelGridSpec,
)
from .errors import ConfigInvalid, DegenerateScale, RefusesLargeGrid

ORACLE_MAX_VOXELS = 10**8


@dataclass(frozen=True)
class SplatConfig:
    occupancy_threshold: float = 0.5
    cutoff: float = 3.0
    saturation_epsilon: float = 1e-12
    scale_floor: float = SCALE_FLOOR

    def __post_init__(self):
        if not 0.0 < self.occupancy_threshold < 1.0:
            raise ConfigInvalid(f"occupancy_threshold must be in (0, 1), got {self.occupancy_threshold}")
        if not self.cutoff > 0:
            raise ConfigInvalid(f"cutoff must be positive, got {self.cutoff}")
        if not self.saturation_epsilon > 0:
            raise ConfigInvalid(f"saturation_epsilon must be positive, got {self.saturation_epsilon}")
        if not self.scale_floor >= SCALE_FLOOR:
            raise ConfigInvalid(f"scale_floor must be >= {SCALE_FLOOR}, got {self.scale_floor}")


# ---------------------------------------------------------------------------
# per-Gaussian math (shared by both evaluators)

def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrices for ``(..., 4)`` unit quaternions in ``(w, x, y, z)`` order."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rot = np.empty(q.shape[:-1] + (3, 3))
    rot[..., 0, 0] = 1 - 2 * (y * y + z * z)
    rot[..., 0, 1] = 2 * (x * y - w * z)
    rot[..., 0, 2] = 2 * (x * z + w * y)
    rot[..., 1, 0] = 2 * (x * y + w * z)
    rot[..., 1, 1] = 1 - 2 * (x * x + z * z)
    rot[..., 1, 2] = 2 * (y * z - w * x)
    rot[..., 2, 0] = 2 * (x * z - w * y)
    rot[..., 2, 1] = 2 * (y * z + w * x)
    rot[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return rot


def _covariances(scales, quats):
    """Covariance and precision matrices, both symmetrised, for stacked Gaussians."""
    rot = quat_to_rotmat(quats)
    cov = np.einsum("...ij,...j,...kj->...ik", rot, scales * scales, rot)
    prec = np.einsum("...ij,...j,...kj->...ik", rot, 1.0 / (scales * scales), rot)
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    prec = 0.5 * (prec + np.swapaxes(prec, -1, -2))
    return cov, prec


def build_covariance(g: Gaussian3D, scale_floor=SCALE_FLOOR, clamp=True) -> np.ndarray:
    """``R S S^T R^T`` for one Gaussian, exactly symmetric."""
    scales = np.asarray(g.scale, dtype=np.float64)
    if clamp:
        scales = np.maximum(scales, scale_floor)
    elif np.any(scales < scale_floor):
        raise DegenerateScale("gaussian.scale", f"{tuple(scales)} below floor {scale_floor}")
    cov, _ = _covariances(scales, np.asarray(g.rotation, dtype=np.float64))
    return cov


def gaussian_prob(x, mean, cov) -> float:
    """Unnormalised Gaussian occupancy ``exp(-0.5 (x-m)^T cov^-1 (x-m))``; 1 at the mean."""
    d = np.asarray(x, dtype=np.float64) - np.asarray(mean, dtype=np.float64)
    d2 = float(d @ np.linalg.solve(np.asarray(cov, dtype=np.float64), d))
    return float(np.exp(-0.5 * max(d2, 0.0)))


def support_aabb(g: Gaussian3D, instance_center, cutoff=3.0):
    """Tight world box ``(lo, hi)`` around the ``cutoff`` Mahalanobis ellipsoid."""
    cov = build_covariance(g)
    center = np.asarray(instance_center, dtype=np.float64) + np.asarray(g.offset)
    half = cutoff * np.sqrt(np.diag(cov))
    return center - half, center + half


def aggregate_occupancy(probs, saturation_epsilon=1e-12) -> float:
    """``1 - prod(1 - p_i)`` in log space; exactly 1 once any ``p_i >= 1 - eps``."""
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    if p.size == 0:
        return 0.0
    if np.any((p < 0) | (p > 1)):
        raise ValueError("probabilities must lie in [0, 1]")
    if np.any(p >= 1.0 - saturation_epsilon):
        return 1.0
    return float(-np.expm1(np.sum(np.log1p(-p))))


def _mahalanobis_sq(dx, dy, dz, prec):
    # fixed operation order; both evaluators must call this with broadcastable
    # per-axis offsets so each voxel sees the same floating-point sequence
    return (prec[0, 0] * (dx * dx) + prec[1, 1] * (dy * dy) + prec[2, 2] * (dz * dz)
            + 2.0 * (prec[0, 1] * (dx * dy) + prec[0, 2] * (dx * dz) + prec[1, 2] * (dy * dz)))


def _log_complement(d2, cfg: SplatConfig):
    """``log(1 - p)`` per voxel, 0.0 beyond the cutoff and -inf when saturated."""
    out = np.zeros(d2.shape)
    inside = d2 <= cfg.cutoff * cfg.cutoff
    p = np.exp(-0.5 * d2[inside])
    with np.errstate(divide="ignore"):
        out[inside] = np.where(p >= 1.0 - cfg.saturation_epsilon, -np.inf, np.log1p(-p))
    return out


def _gaussian_params(inst: InstancePrediction, cfg: SplatConfig):
    means, scales, quats = inst.gaussian_arrays
    scales = np.maximum(scales, cfg.scale_floor)
    cov, prec = _covariances(scales, quats)
    return means, cov, prec


def _occupied(log_acc, cfg):
    return -np.expm1(log_acc) >= cfg.occupancy_threshold


# ---------------------------------------------------------------------------
# sparse path

def _support_index_ranges(means, cov, grid: VoxelGridSpec, cutoff):
    """Inclusive per-Gaussian voxel index ranges ``(lo, hi)`` clipped to the grid.

    Widened by one voxel on each side so rounding never drops a centre that
    the cutoff test would accept; the cutoff test stays the final arbiter.
    """
    half = cutoff * np.sqrt(np.diagonal(cov, axis1=-2, axis2=-1))
    gmin = np.asarray(grid.min_corner)
    vs = np.asarray(grid.voxel_size)
    dims = np.asarray(grid.dims)
    lo = np.ceil((means - half - gmin) / vs - 0.5).astype(np.int64) - 1
    hi = np.floor((means + half - gmin) / vs - 0.5).astype(np.int64) + 1
    return np.maximum(lo, 0), np.minimum(hi, dims - 1)


def _sparse_log_acc(inst: InstancePrediction, grid: VoxelGridSpec, cfg: SplatConfig):
    """Accumulated log complement over the instance's local box.

    Returns ``(box_lo, acc)``; ``acc`` is None when no support touches the grid.
    """
    means, cov, prec = _gaussian_params(inst, cfg)
    lo, hi = _support_index_ranges(means, cov, grid, cfg.cutoff)
    live = np.all(hi >= lo, axis=1)
    if not live.any():
        return None, None
    means, prec, lo, hi = means[live], prec[live], lo[live], hi[live]
    size = hi - lo + 1
    box_lo = lo.min(axis=0)
    acc = np.zeros(tuple(hi.max(axis=0) - box_lo + 1))

    # Evaluate all Gaussians at once on a common padded box. Padding cells are
    # either real voxels (scored exactly as the oracle would) or off-grid
    # cells, which are never accumulated.
    pad = size.max(axis=0)
    k = len(means)
    offsets = [
        grid.centers_of(a, lo[:, a, None] + np.arange(pad[a])) - means[:, a, None]
        for a in range(3)
    ]
    dx = offsets[0].reshape(k, pad[0], 1, 1)
    dy = offsets[1].reshape(k, 1, pad[1], 1)
    dz = offsets[2].reshape(k, 1, 1, pad[2])
    stacked_prec = prec.transpose(1, 2, 0)[..., None, None, None]
    logq = _log_complement(_mahalanobis_sq(dx, dy, dz, stacked_prec), cfg)

    # Gaussian-ordered accumulation, same sequence as the oracle
    start = lo - box_lo
    for g in range(k):
        (bx, by, bz), (sx, sy, sz) = start[g], size[g]
        acc[bx:bx + sx, by:by + sy, bz:bz + sz] += logq[g, :sx, :sy, :sz]
    return box_lo, acc


def _box_to_linear(box_lo, local_ijk, grid):
    return grid.ravel(local_ijk + box_lo)


def instance_probabilities(inst: InstancePrediction, grid: VoxelGridSpec,
                           cfg: SplatConfig = SplatConfig()):
    """Aggregated occupancy probability of every voxel some Gaussian reaches.

    Returns ``(linear_indices, probs)`` sorted by index.
    """
    box_lo, acc = _sparse_log_acc(inst, grid, cfg)
    if acc is None:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    local = np.argwhere(acc < 0)
    probs = -np.expm1(acc[tuple(local.T)])
    return _box_to_linear(box_lo, local, grid), probs


def _to_occupancy(inst, voxels, grid):
    return SparseInstanceOccupancy(inst.class_id, inst.score, voxels, inst.track_id, grid)


def splat_instance(inst: InstancePrediction, grid: VoxelGridSpec,
                   cfg: SplatConfig = SplatConfig()) -> SparseInstanceOccupancy:
    box_lo, acc = _sparse_log_acc(inst, grid, cfg)
    if acc is None:
        return _to_occupancy(inst, np.zeros(0, dtype=np.int64), grid)
    local = np.argwhere(_occupied(acc, cfg))
    return _to_occupancy(inst, _box_to_linear(box_lo, local, grid), grid)


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("GUIDE_THREADS", "1")))
    except ValueError:
        return 1


def splat_scene(instances: Sequence[InstancePrediction], grid: VoxelGridSpec,
                cfg: SplatConfig = SplatConfig(), threads=None,
                oracle=False) -> List[SparseInstanceOccupancy]:
    """Splat each instance independently; output order follows input order."""
    fn = dense_oracle_splat if oracle else splat_instance
    threads = default_threads() if threads is None else max(1, int(threads))
    if threads == 1 or len(instances) < 2:
        return [fn(inst, grid, cfg) for inst in instances]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda inst: fn(inst, grid, cfg), instances))


# ---------------------------------------------------------------------------
# dense oracle: no support boxes, no index ranges

def dense_log_acc(inst: InstancePrediction, grid: VoxelGridSpec, cfg: SplatConfig = SplatConfig()):
    """Accumulated log complement over the full grid, shape ``grid.dims``."""
    if grid.n_voxels > ORACLE_MAX_VOXELS:
        raise RefusesLargeGrid(f"{grid.n_voxels} voxels exceeds the oracle limit {ORACLE_MAX_VOXELS}")
    means, _, prec = _gaussian_params(inst, cfg)
    cx, cy, cz = (grid.axis_centers(a) for a in range(3))
    acc = np.zeros(grid.dims)
    for g in range(len(means)):
        dx = (cx - means[g, 0])[:, None, None]
        dy = (cy - means[g, 1])[None, :, None]
        dz = (cz - means[g, 2])[None, None, :]
        acc += _log_complement(_mahalanobis_sq(dx, dy, dz, prec[g]), cfg)
    return acc


def dense_oracle_splat(inst: InstancePrediction, grid: VoxelGridSpec,
                       cfg: SplatConfig = SplatConfig()) -> SparseInstanceOccupancy:
    occ = _occupied(dense_log_acc(inst, grid, cfg), cfg)
    return _to_occupancy(inst, np.flatnonzero(occ.reshape(-1)), grid)
