"""Rotation-invariant point cloud registration.

Local and global point-pair-feature signatures feed PointNet encoders, an
attention stack adds cross-frame context, and slack-augmented Sinkhorn
matching inside matched node vicinities yields point correspondences that
RANSAC turns into a rigid transform.
"""

from .geom import PointCloud, RigidTransform
from .encoders import ModelConfig, init_params
from .pipeline import PipelineConfig, match_pair, register_pair
from .config import RunConfig, load_config

__all__ = ["PointCloud", "RigidTransform", "ModelConfig", "init_params", "PipelineConfig",
           "match_pair", "register_pair", "RunConfig", "load_config"]
__version__ = "0.1.0"
