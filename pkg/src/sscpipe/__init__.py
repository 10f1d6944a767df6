"""Desk-scale semantic scene completion pipeline on a from-scratch autodiff core."""

from .autodiff import (Adam, DimensionError, NonFiniteError, Parameter, SGD,
                       Tensor, gradcheck)
from .camera import CameraPose, CameraRig, ConfigurationError, canonical_pose
from .config import PipelineConfig
from .depth_volume import (DEPTH_STRATEGIES, DepthBinSpec, DepthDistribution,
                           DisparityBinSpec, analytical_resample, ddvm_forward,
                           expected_depth, onehot_from_depthmap)
from .fusion import (FUSION_STRATEGIES, aaf_fuse, channel_attention_3d_fuse,
                     passthrough_fuse)
from .geo_context import GcaAdapter, GcaBlock, GcaConfig, build_geo_prior, geo_attention
from .losses import LossWeights, evaluate, scal_loss, seg_loss_2d, total_loss, weighted_ce
from .pipeline import Pipeline, TrainResult, ablate, train_toy
from .scene import (UNKNOWN, SyntheticSample, VoxelGrid, generate_scene,
                    load_sample, make_sample, raycast_depth, save_sample)
from .tensor_io import ParseError, read_tensor, write_tensor
from .view_transform import (Frustum, GridSpec, QueryProposalSet, VoxelRefiner,
                             lift, propose_queries, voxel_pool)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
