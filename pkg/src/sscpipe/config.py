"""Run configuration: every dimension, strategy toggle and hyperparameter.

Serialized as flat `section.key=value` lines, diff-friendly and lossless
under parse -> serialize -> parse.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

from .camera import CameraRig, ConfigurationError
from .depth_volume import DEPTH_STRATEGIES, DepthBinSpec, DisparityBinSpec
from .fusion import FUSION_STRATEGIES
from .geo_context import GcaConfig
from .losses import LossWeights
from .view_transform import GridSpec, RefineConfig


@dataclass
class PipelineConfig:
    # voxel grid
    grid_dims: tuple = (32, 32, 8)
    voxel_size_m: float = 0.2
    # model widths
    channels: int = 16
    d_disp: int = 12
    d_depth: int = 16
    # depth / disparity bins
    depth_min: float = 0.4
    depth_max: float = 8.0
    depth_spacing: str = "uniform"
    disp_min: float = 1.6
    disp_max: float = 13.0
    # camera
    fx: float = 24.0
    fy: float = 24.0
    cx: float = 24.0
    cy: float = 12.0
    baseline_m: float = 0.54
    image_h: int = 24
    image_w: int = 48
    # context adapter
    gca_heads: int = 4
    gca_blocks: int = 2
    gca_alpha_init: float = 0.5
    gca_axial: bool = True
    gca_renormalize: bool = False
    # strategies
    depth_strategy: str = "ddvm"
    fusion_strategy: str = "aaf"
    # losses
    lambda_d: float = 0.001
    lambda_seg: float = 1.0
    # training
    seed: int = 0
    train_steps: int = 300
    train_scenes: int = 8
    holdout_scenes: int = 2
    learning_rate: float = 0.01
    # scene synthesis
    num_classes: int = 4  # semantic classes; channel count is num_classes + 1
    cost_noise: float = 0.0
    feature_noise: float = 0.0
    cost_sharpness: float = 4.0
    cull_occluded: bool = False
    # refinement
    refine_points: int = 4
    refine_rounds: int = 2
    proposal_cap: int = 0  # 0 = num_voxels // 4

    KEYMAP = {
        "grid.dims": "grid_dims", "grid.voxel_size": "voxel_size_m",
        "model.channels": "channels", "model.d_disp": "d_disp", "model.d_depth": "d_depth",
        "bins.depth_min": "depth_min", "bins.depth_max": "depth_max",
        "bins.depth_spacing": "depth_spacing", "bins.disp_min": "disp_min",
        "bins.disp_max": "disp_max",
        "cam.fx": "fx", "cam.fy": "fy", "cam.cx": "cx", "cam.cy": "cy",
        "cam.baseline": "baseline_m", "cam.image_h": "image_h", "cam.image_w": "image_w",
        "gca.heads": "gca_heads", "gca.blocks": "gca_blocks",
        "gca.alpha_init": "gca_alpha_init", "gca.axial": "gca_axial",
        "gca.renormalize": "gca_renormalize",
        "strategy.depth": "depth_strategy", "strategy.fusion": "fusion_strategy",
        "loss.lambda_d": "lambda_d", "loss.lambda_seg": "lambda_seg",
        "train.seed": "seed", "train.steps": "train_steps",
        "train.scenes": "train_scenes", "train.holdout": "holdout_scenes",
        "train.lr": "learning_rate",
        "scene.classes": "num_classes", "scene.cost_noise": "cost_noise",
        "scene.feature_noise": "feature_noise", "scene.sharpness": "cost_sharpness",
        "scene.cull": "cull_occluded",
        "refine.points": "refine_points", "refine.rounds": "refine_rounds",
        "refine.cap": "proposal_cap",
    }

    def __post_init__(self):
        self.grid_dims = tuple(int(v) for v in self.grid_dims)
        self.validate()

    def validate(self) -> None:
        if self.depth_strategy not in DEPTH_STRATEGIES:
            raise ConfigurationError(
                f"strategy.depth must be one of {DEPTH_STRATEGIES}, got {self.depth_strategy!r}")
        if self.fusion_strategy not in FUSION_STRATEGIES:
            raise ConfigurationError(
                f"strategy.fusion must be one of {FUSION_STRATEGIES}, got {self.fusion_strategy!r}")
        if any(d <= 0 for d in self.grid_dims):
            raise ConfigurationError(f"grid dims must be positive, got {self.grid_dims}")
        if self.num_classes < 1 or self.channels < self.num_classes + 1:
            raise ConfigurationError("need channels >= num_classes + 1 for class embeddings")

    # -- derived specs ------------------------------------------------------

    def rig(self) -> CameraRig:
        return CameraRig(fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy,
                         baseline_m=self.baseline_m, image_h=self.image_h, image_w=self.image_w)

    def grid_spec(self) -> GridSpec:
        return GridSpec(dims=self.grid_dims, origin_m=(0.0, 0.0, 0.0),
                        voxel_size_m=self.voxel_size_m)

    def depth_bins(self) -> DepthBinSpec:
        return DepthBinSpec(num_bins=self.d_depth, d_min=self.depth_min,
                            d_max=self.depth_max, spacing=self.depth_spacing)

    def disp_bins(self) -> DisparityBinSpec:
        return DisparityBinSpec(num_bins=self.d_disp, min_disp=self.disp_min,
                                max_disp=self.disp_max)

    def gca_config(self) -> GcaConfig:
        return GcaConfig(num_heads=self.gca_heads, num_blocks=self.gca_blocks,
                         alpha_init=self.gca_alpha_init, use_axial=self.gca_axial,
                         renormalize=self.gca_renormalize)

    def loss_weights(self) -> LossWeights:
        return LossWeights(lambda_d=self.lambda_d, lambda_seg=self.lambda_seg)

    def refine_config(self) -> RefineConfig:
        return RefineConfig(num_points=self.refine_points, num_rounds=self.refine_rounds)

    def cap(self) -> int:
        return self.proposal_cap if self.proposal_cap > 0 else max(1, self.grid_spec().num_voxels() // 4)

    def total_classes(self) -> int:
        return self.num_classes + 1

    # -- serialization -------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for key, attr in self.KEYMAP.items():
            val = getattr(self, attr)
            if isinstance(val, tuple):
                txt = ",".join(str(v) for v in val)
            elif isinstance(val, bool):
                txt = "true" if val else "false"
            elif isinstance(val, float):
                txt = repr(val)
            else:
                txt = str(val)
            lines.append(f"{key}={txt}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PipelineConfig":
        types = {f.name: f for f in fields(cls)}
        kwargs = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigurationError(f"config line {lineno}: expected key=value, got {raw!r}")
            key, val = line.split("=", 1)
            key, val = key.strip(), val.strip()
            attr = cls.KEYMAP.get(key)
            if attr is None:
                raise ConfigurationError(f"config line {lineno}: unknown key {key!r}")
            kwargs[attr] = _parse_value(val, types[attr].default, key)
        return cls(**kwargs)

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_text())

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path) as f:
            return cls.from_text(f.read())


def _parse_value(val: str, default, key: str):
    if isinstance(default, tuple):
        return tuple(int(v) for v in val.split(","))
    if isinstance(default, bool):
        if val.lower() not in ("true", "false"):
            raise ConfigurationError(f"{key}: expected true/false, got {val!r}")
        return val.lower() == "true"
    if isinstance(default, int):
        return int(val)
    if isinstance(default, float):
        return float(val)
    return val
