"""Instance occupancy from 3D Gaussians.

Sparse Gaussian-to-voxel splatting at any resolution, instance-occupancy mAP
and semantic mIoU, assignment and focal-loss arithmetic for supervision, and a
confidence-gated instance bank for tracking.
"""

from .core import (
    Gaussian3D,
    InstanceAnchor,
    InstancePrediction,
    SparseInstanceOccupancy,
    VoxelGridSpec,
    voxel_center,
    world_to_voxel,
)
from .metrics import EvalReport, average_precision, greedy_match, map_occ, semantic_miou, voxel_iou
from .splat import (
    SplatConfig,
    aggregate_occupancy,
    build_covariance,
    dense_oracle_splat,
    gaussian_prob,
    splat_instance,
    splat_scene,
    support_aabb,
)
from .supervision import (
    MatchCostConfig,
    focal_loss,
    hungarian,
    l1_loss,
    occupancy_loss,
    pairwise_cost,
    total_loss,
)
from .track import TrackBank, TrackBankConfig, bank_step, count_id_switches, propagate_anchor

__version__ = "0.1.0"
