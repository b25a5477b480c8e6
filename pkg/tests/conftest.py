from pathlib import Path

import numpy as np
import pytest

from instocc.core import Gaussian3D, InstanceAnchor, InstancePrediction, VoxelGridSpec

GOLDEN = Path(__file__).parent / "golden"

# 16 m x 16 m x 6.4 m; divisible by 0.8, 0.4 and 0.2
SMALL_RANGE = ((-8.0, -8.0, -1.0), (8.0, 8.0, 5.4))


def small_grid(voxel_size=0.4):
    return VoxelGridSpec(*SMALL_RANGE, (voxel_size,) * 3)


def random_quat(rng):
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def random_instance(rng, grid, k, class_id=0, score=None, margin=0.0, scale=(0.1, 0.8)):
    # margin applies in the ground plane only
    pad = np.array([margin, margin, 0.0])
    lo = np.asarray(grid.min_corner) + pad
    hi = np.asarray(grid.max_corner) - pad
    extent = rng.uniform([1.0, 1.0, 1.0], [4.5, 4.5, 2.0])
    anchor = InstanceAnchor.from_yaw(rng.uniform(lo, hi), extent, rng.uniform(-np.pi, np.pi),
                                     rng.uniform(-2, 2, size=2))
    gaussians = [
        Gaussian3D.create(rng.uniform(-0.5, 0.5, 3) * extent, rng.uniform(*scale, size=3),
                          random_quat(rng))
        for _ in range(k)
    ]
    if score is None:
        score = float(rng.uniform(0.05, 1.0))
    return InstancePrediction(class_id, score, anchor, gaussians)


def single_gaussian(center, scale, rotation=(1.0, 0.0, 0.0, 0.0), class_id=0, score=0.9,
                    track_id=None):
    anchor = InstanceAnchor.from_yaw(center, (1.0, 1.0, 1.0), 0.0)
    return InstancePrediction(class_id, score, anchor,
                              [Gaussian3D.create((0, 0, 0), scale, rotation)], track_id)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
