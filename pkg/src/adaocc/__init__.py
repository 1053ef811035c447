"""Adaptive-resolution semantic occupancy: coarse voxel maps fused with
folding-decoded object point clouds, plus losses, metrics and a synthetic
scene toolkit."""

from .features import BoxFeaturePooler, FeatureVolume, interpolate, sample_object_feature
from .folding import FoldingDecoder, fold_forward, fold_gradients, make_grid2d, train_folding
from .geometry import (
    CLOSE_RANGE,
    FULL_RANGE,
    GridSpec,
    OrientedBox3,
    Pose,
    SceneBounds,
    box_sampling_grid,
    point_in_box,
    transform_point,
    world_to_grid,
)
from .losses import FocalConfig, JointLossWeights, chamfer, focal_loss, joint_loss, l1_box_loss
from .metrics import MetricsReport, evaluate, hausdorff, iou, match_objects, miou
from .nn import TrainConfig
from .occhead import OccHead, occ_forward, occ_predict, train_occ_head
from .voxel import (
    AdaptiveMap,
    PointCloud,
    SemanticVoxelGrid,
    crop,
    fuse,
    grid_to_centers,
    memory_stats,
    resample,
    voxelize_points,
)

__version__ = "0.1.0"
