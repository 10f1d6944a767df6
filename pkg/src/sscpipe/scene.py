"""Procedural voxel scenes and the synthetic stand-in for the frozen encoder.

Everything here is a pure function of (seed, parameters): ground-truth label
grids, DDA-raycast depth maps, synthetic disparity cost volumes, and per-pixel
class-embedding feature maps. Depth is measured as ray distance to the
midpoint of the ray segment inside the first occupied voxel, so unprojecting
(pixel, depth) always lands strictly inside that voxel.
"""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .camera import CameraPose, CameraRig, ConfigurationError, canonical_pose
from .depth_volume import DisparityBinSpec
from . import tensor_io
from .tensor_io import ParseError

UNKNOWN = 255


@dataclass
class VoxelGrid:
    """Labeled 3D grid; 0 = empty, 255 = unknown, otherwise a semantic class."""

    dims: tuple  # (X, Y, Z)
    origin_m: tuple
    voxel_size_m: float
    labels: np.ndarray  # uint8, shape dims

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.voxel_size_m <= 0:
            raise ConfigurationError("voxel_size_m must be positive")
        if self.labels.shape != tuple(self.dims):
            raise ConfigurationError(f"labels shape {self.labels.shape} != dims {self.dims}")

    def copy(self) -> "VoxelGrid":
        return VoxelGrid(tuple(self.dims), tuple(self.origin_m), self.voxel_size_m, self.labels.copy())

    def world_to_voxel(self, points: np.ndarray) -> np.ndarray:
        """Continuous voxel-index coordinates (voxel (0,0,0) spans [0,1)^3)."""
        return (np.asarray(points, dtype=np.float64) - np.asarray(self.origin_m)) / self.voxel_size_m

    def voxel_centers(self, indices: np.ndarray) -> np.ndarray:
        return np.asarray(self.origin_m) + (np.asarray(indices, dtype=np.float64) + 0.5) * self.voxel_size_m

    def occupied_mask(self) -> np.ndarray:
        return (self.labels != 0) & (self.labels != UNKNOWN)


def generate_scene(seed: int, dims, num_classes: int,
                   origin_m=(0.0, 0.0, 0.0), voxel_size_m: float = 0.2) -> VoxelGrid:
    """Flat ground plane plus 2..8 axis-aligned boxes of random classes.

    `num_classes` counts the empty class: labels are drawn from
    {0, 1, .., num_classes-1}.
    """
    dims = tuple(int(d) for d in dims)
    if any(d < 4 for d in dims):
        raise ConfigurationError(f"grid dims must each be >= 4, got {dims}")
    if not 2 <= num_classes <= 20:
        raise ConfigurationError(f"num_classes must be in [2, 20], got {num_classes}")
    x, y, z = dims
    rng = np.random.default_rng(seed)
    labels = np.zeros(dims, dtype=np.uint8)
    ground_class = 1
    labels[:, :, 0] = ground_class

    n_boxes = int(rng.integers(2, 9))
    for _ in range(n_boxes):
        cls = int(rng.integers(1, num_classes)) if num_classes > 2 else 1
        sx = int(rng.integers(1, max(2, x // 4) + 1))
        sy = int(rng.integers(1, max(2, y // 4) + 1))
        sz = int(rng.integers(1, max(2, z // 2) + 1))
        px = int(rng.integers(0, x - sx + 1))
        py = int(rng.integers(0, y - sy + 1))
        pz = int(rng.integers(1, max(2, z - sz + 1)))
        labels[px:px + sx, py:py + sy, pz:pz + sz] = cls
    return VoxelGrid(dims, tuple(float(v) for v in origin_m), voxel_size_m, labels)


# ---------------------------------------------------------------------------
# raycasting
# ---------------------------------------------------------------------------

def _ray_box_entry(pos, direction, dims):
    """Parameter t at which the ray enters the unit-voxel box [0, dims]; None if it misses."""
    t0, t1 = 0.0, np.inf
    for a in range(3):
        if abs(direction[a]) < 1e-15:
            if pos[a] < 0.0 or pos[a] > dims[a]:
                return None
            continue
        ta = (0.0 - pos[a]) / direction[a]
        tb = (dims[a] - pos[a]) / direction[a]
        lo, hi = min(ta, tb), max(ta, tb)
        t0, t1 = max(t0, lo), min(t1, hi)
    if t0 > t1:
        return None
    return t0


def _traverse(grid: VoxelGrid, rig: CameraRig, pose: CameraPose, collect_observed: bool = False):
    """DDA traversal of every pixel ray.

    Returns (depth [H,W] meters, hit voxel index [H,W,3] or -1, observed mask).
    Unknown voxels are transparent; depth is the segment midpoint inside the
    first occupied voxel, 0 where the ray exits without a hit.
    """
    dims = np.array(grid.dims)
    vs = grid.voxel_size_m
    labels = grid.labels
    dirs = pose.rays_to_grid(rig)  # [H, W, 3], unit, meters
    cam_vox = grid.world_to_voxel(pose.origin())

    depth = np.zeros((rig.image_h, rig.image_w), dtype=np.float64)
    hit_idx = np.full((rig.image_h, rig.image_w, 3), -1, dtype=np.int64)
    observed = np.zeros(grid.dims, dtype=bool) if collect_observed else None

    for i in range(rig.image_h):
        for j in range(rig.image_w):
            d = dirs[i, j] / vs  # voxel units per meter of ray length
            t_entry = _ray_box_entry(cam_vox, d, dims)
            if t_entry is None:
                continue
            eps = 1e-9
            t = t_entry + eps
            p = cam_vox + t * d
            vox = np.floor(p).astype(np.int64)
            vox = np.clip(vox, 0, dims - 1)
            step = np.where(d > 0, 1, -1)
            with np.errstate(divide="ignore"):
                t_delta = np.abs(1.0 / d)
            next_bound = np.where(d > 0, vox + 1, vox)
            with np.errstate(divide="ignore", invalid="ignore"):
                t_max = np.where(np.abs(d) > 1e-15, (next_bound - cam_vox) / d, np.inf)

            while np.all(vox >= 0) and np.all(vox < dims):
                lab = labels[vox[0], vox[1], vox[2]]
                axis = int(np.argmin(t_max))
                t_exit = t_max[axis]
                # corner/edge grazes have zero chord length; the segment
                # midpoint would sit on the voxel boundary, so skip them
                if lab != 0 and lab != UNKNOWN and t_exit - t > 1e-6:
                    depth[i, j] = 0.5 * (t + t_exit)
                    hit_idx[i, j] = vox
                    if collect_observed:
                        observed[vox[0], vox[1], vox[2]] = True
                    break
                if collect_observed:
                    observed[vox[0], vox[1], vox[2]] = True
                t = t_exit
                vox = vox.copy()
                vox[axis] += step[axis]
                t_max = t_max.copy()
                t_max[axis] += t_delta[axis]

    return depth, hit_idx, observed


def raycast_depth(grid: VoxelGrid, rig: CameraRig, pose: CameraPose) -> np.ndarray:
    """Per-pixel metric ray distance to the first occupied voxel; 0 on no hit."""
    depth, _, _ = _traverse(grid, rig, pose)
    return depth


def depth_to_disparity(depth: np.ndarray, rig: CameraRig) -> np.ndarray:
    return rig.disparity_from_depth(depth)


def apply_visibility_culling(grid: VoxelGrid, rig: CameraRig, pose: CameraPose) -> VoxelGrid:
    """Mark voxels never observed from the camera (neither free nor first-hit) unknown."""
    _, _, observed = _traverse(grid, rig, pose, collect_observed=True)
    culled = grid.copy()
    culled.labels[~observed] = UNKNOWN
    return culled


# ---------------------------------------------------------------------------
# synthetic encoder outputs
# ---------------------------------------------------------------------------

def synth_cost_volume(disparity: np.ndarray, bins: DisparityBinSpec,
                      sharpness: float, noise: float, seed: int) -> np.ndarray:
    """Per-pixel softmax over disparity bins peaked at the true disparity.

    Logits are -sharpness * (center - disparity)^2 plus optional Gaussian
    noise. Disparities outside the bin range (including the no-hit sentinel 0)
    are clamped, with one counted warning.
    """
    if sharpness <= 0:
        raise ConfigurationError("sharpness must be positive")
    if noise < 0:
        raise ConfigurationError("noise must be non-negative")
    disparity = np.asarray(disparity, dtype=np.float64)
    centers = bins.centers()
    clamped = np.clip(disparity, centers[0], centers[-1])
    n_clamped = int(np.count_nonzero(clamped != disparity))
    if n_clamped:
        warnings.warn(f"synth_cost_volume: clamped {n_clamped} disparities into bin range",
                      stacklevel=2)
    logits = -sharpness * (centers[:, None, None] - clamped[None, :, :]) ** 2
    if noise > 0:
        rng = np.random.default_rng(seed)
        logits = logits + noise * rng.standard_normal(logits.shape)
    logits -= logits.max(axis=0, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=0, keepdims=True)


def class_embeddings(embed_dim: int, num_classes: int) -> np.ndarray:
    """Fixed orthonormal per-class embeddings, [num_classes, embed_dim]."""
    if embed_dim < num_classes:
        raise ConfigurationError(f"embed_dim {embed_dim} < num_classes {num_classes}")
    return np.eye(num_classes, embed_dim)


def synth_context_features(grid: VoxelGrid, rig: CameraRig, pose: CameraPose,
                           embed_dim: int, noise: float, seed: int):
    """Per-pixel class embedding of the first-hit voxel plus optional noise.

    Returns (features [C, H, W], labels_2d [H, W]); no-hit (sky) pixels carry
    the dedicated empty-class embedding and label 0.
    """
    _, hit_idx, _ = _traverse(grid, rig, pose)
    num_classes = int(grid.labels[grid.labels != UNKNOWN].max(initial=0)) + 1
    emb = class_embeddings(embed_dim, max(num_classes, 1))

    seg = np.zeros((rig.image_h, rig.image_w), dtype=np.int64)
    hit = hit_idx[:, :, 0] >= 0
    ii, jj = np.nonzero(hit)
    seg[ii, jj] = grid.labels[hit_idx[ii, jj, 0], hit_idx[ii, jj, 1], hit_idx[ii, jj, 2]]

    feats = emb[seg.reshape(-1)].T.reshape(embed_dim, rig.image_h, rig.image_w)
    if noise > 0:
        rng = np.random.default_rng(seed)
        feats = feats + noise * rng.standard_normal(feats.shape)
    return feats, seg


@dataclass
class SyntheticSample:
    """All encoder outputs for one scene, plus the ground truth that made them."""

    grid: VoxelGrid
    depth_map: np.ndarray       # [H, W], meters, 0 = no hit
    disparity_volume: np.ndarray  # [D_disp, H, W], per-pixel distribution
    context_features: np.ndarray  # [C, H, W]
    seg_labels_2d: np.ndarray     # [H, W], int class IDs
    rig: CameraRig

    def validate(self) -> None:
        if np.any(self.depth_map < 0):
            raise ValueError("depth map has negative entries")
        sums = self.disparity_volume.sum(axis=0)
        if np.max(np.abs(sums - 1.0)) > 1e-6:
            raise ValueError("disparity volume columns must sum to 1")


def make_sample(seed: int, dims, num_classes: int, rig: CameraRig,
                disp_bins: DisparityBinSpec, embed_dim: int,
                voxel_size_m: float = 0.2, sharpness: float = 4.0,
                cost_noise: float = 0.0, feature_noise: float = 0.0,
                cull_occluded: bool = False) -> SyntheticSample:
    """Generate a full synthetic sample: scene, depth, cost volume, features."""
    grid = generate_scene(seed, dims, num_classes, voxel_size_m=voxel_size_m)
    pose = canonical_pose(grid.origin_m, grid.dims, grid.voxel_size_m)
    visible = grid
    if cull_occluded:
        visible = apply_visibility_culling(grid, rig, pose)
    depth = raycast_depth(grid, rig, pose)
    disparity = depth_to_disparity(depth, rig)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        volume = synth_cost_volume(disparity, disp_bins, sharpness, cost_noise, seed + 1)
    feats, seg = synth_context_features(grid, rig, pose, embed_dim, feature_noise, seed + 2)
    return SyntheticSample(grid=visible, depth_map=depth, disparity_volume=volume,
                           context_features=feats, seg_labels_2d=seg, rig=rig)


# ---------------------------------------------------------------------------
# sample container file ("SSCS")
# ---------------------------------------------------------------------------

SAMPLE_MAGIC = b"SSCS"
SAMPLE_VERSION = 1


def save_sample(path, sample: SyntheticSample) -> None:
    with open(path, "wb") as f:
        f.write(SAMPLE_MAGIC)
        f.write(struct.pack("<H", SAMPLE_VERSION))
        r = sample.rig
        # two trailing float64 slots are reserved padding
        f.write(struct.pack("<7d", r.fx, r.fy, r.cx, r.cy, r.baseline_m, 0.0, 0.0))
        f.write(struct.pack("<2I", r.image_h, r.image_w))
        g = sample.grid
        f.write(struct.pack("<3I", *g.dims))
        f.write(struct.pack("<3d", *g.origin_m))
        f.write(struct.pack("<d", g.voxel_size_m))
        f.write(np.ascontiguousarray(g.labels).tobytes())
        tensor_io.write_tensor(f, sample.depth_map)
        tensor_io.write_tensor(f, sample.disparity_volume)
        tensor_io.write_tensor(f, sample.context_features)
        tensor_io.write_tensor(f, np.asarray(sample.seg_labels_2d, dtype=np.float64))


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise ParseError(f"truncated sample file while reading {what}", f.tell())
    return data


def load_sample(path) -> SyntheticSample:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != SAMPLE_MAGIC:
            raise ParseError(f"bad sample magic {magic!r}", 0)
        version = struct.unpack("<H", _read_exact(f, 2, "version"))[0]
        if version != SAMPLE_VERSION:
            raise ParseError(f"unsupported sample version {version}", 4)
        fx, fy, cx, cy, baseline, _, _ = struct.unpack("<7d", _read_exact(f, 56, "rig"))
        image_h, image_w = struct.unpack("<2I", _read_exact(f, 8, "rig dims"))
        rig = CameraRig(fx=fx, fy=fy, cx=cx, cy=cy, baseline_m=baseline,
                        image_h=image_h, image_w=image_w)
        dims = struct.unpack("<3I", _read_exact(f, 12, "grid dims"))
        origin = struct.unpack("<3d", _read_exact(f, 24, "grid origin"))
        voxel_size = struct.unpack("<d", _read_exact(f, 8, "voxel size"))[0]
        n = dims[0] * dims[1] * dims[2]
        labels = np.frombuffer(_read_exact(f, n, "labels"), dtype=np.uint8).reshape(dims).copy()
        grid = VoxelGrid(dims, origin, voxel_size, labels)
        depth = tensor_io.read_tensor(f)
        volume = tensor_io.read_tensor(f)
        feats = tensor_io.read_tensor(f)
        seg = tensor_io.read_tensor(f).astype(np.int64)
    return SyntheticSample(grid=grid, depth_map=depth, disparity_volume=volume,
                           context_features=feats, seg_labels_2d=seg, rig=rig)
