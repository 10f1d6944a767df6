"""2D-to-3D lifting: frustum construction, voxel splatting, query proposals
and a dense trilinear variant of deformable attention refinement."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .camera import CameraPose, CameraRig
from .depth_volume import DepthBinSpec, DepthDistribution
from .scene import VoxelGrid


@dataclass(frozen=True)
class GridSpec:
    dims: tuple          # (X, Y, Z)
    origin_m: tuple
    voxel_size_m: float

    @staticmethod
    def of(grid: VoxelGrid) -> "GridSpec":
        return GridSpec(tuple(grid.dims), tuple(grid.origin_m), grid.voxel_size_m)

    def num_voxels(self) -> int:
        return int(np.prod(self.dims))

    def world_to_voxel(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - np.asarray(self.origin_m)) / self.voxel_size_m

    def voxel_centers(self, indices: np.ndarray) -> np.ndarray:
        return np.asarray(self.origin_m) + (np.asarray(indices, dtype=np.float64) + 0.5) * self.voxel_size_m


@dataclass
class Frustum:
    """Lifted features on the (depth bin, pixel) lattice plus their 3D points."""

    features: Tensor       # [C, D, H, W]
    points_3d: np.ndarray  # [D, H, W, 3], grid-frame meters
    bins: DepthBinSpec


@dataclass
class FeatureVolume:
    features: Tensor  # [C, X, Y, Z]
    kind: str         # "lss" | "vt" | "fused"


@dataclass
class QueryProposalSet:
    indices: np.ndarray  # [Nq, 3] unique in-bounds voxel coordinates
    features: Tensor     # [Nq, C]

    def __len__(self):
        return self.indices.shape[0]


def frustum_points(rig: CameraRig, pose: CameraPose, bins: DepthBinSpec) -> np.ndarray:
    """Grid-frame 3D point of every (depth bin, pixel), [D, H, W, 3].

    Points lie at bin-center ray distance along each pixel ray.
    """
    dirs = pose.rays_to_grid(rig)  # [H, W, 3]
    centers = bins.centers()
    return pose.origin() + centers[:, None, None, None] * dirs[None, :, :, :]


def lift(context: Tensor, depth_dist: DepthDistribution, rig: CameraRig,
         pose: CameraPose, bins: DepthBinSpec) -> Frustum:
    """Outer product of context features and the depth distribution."""
    probs = depth_dist.probs
    c, h, w = context.shape
    d = probs.shape[0]
    if probs.shape[1:] != (h, w):
        raise ad.DimensionError(f"context {context.shape} and depth dist {probs.shape} disagree on H, W")
    g = ad.mul(ad.reshape(context, (c, 1, h, w)), ad.reshape(probs, (1, d, h, w)))
    return Frustum(features=g, points_3d=frustum_points(rig, pose, bins), bins=bins)


def voxel_pool(frustum: Frustum, grid_spec: GridSpec) -> FeatureVolume:
    """Sum each frustum point's feature into the voxel containing it.

    Out-of-bounds points are dropped; in-bounds feature mass is conserved
    exactly (sum pooling).
    """
    c, d, h, w = frustum.features.shape
    vox = np.floor(grid_spec.world_to_voxel(frustum.points_3d.reshape(-1, 3))).astype(np.int64)
    dims = np.array(grid_spec.dims)
    inb = np.all((vox >= 0) & (vox < dims), axis=1)
    flat_idx = np.ravel_multi_index((vox[inb, 0], vox[inb, 1], vox[inb, 2]), grid_spec.dims)

    feats = ad.reshape(ad.transpose(frustum.features, (1, 2, 3, 0)), (d * h * w, c))
    kept = ad.gather_rows(feats, np.nonzero(inb)[0])
    pooled = ad.scatter_add_rows(kept, flat_idx, grid_spec.num_voxels())
    volume = ad.transpose(ad.reshape(pooled, grid_spec.dims + (c,)), (3, 0, 1, 2))
    return FeatureVolume(features=volume, kind="lss")


def propose_queries(depth: np.ndarray, f_lss: FeatureVolume, rig: CameraRig,
                    pose: CameraPose, grid_spec: GridSpec, cap: int | None = None) -> QueryProposalSet:
    """Voxels hit by unprojected depth pixels, deduplicated, nearest-first capped.

    Initial features are read from the splatted volume at those voxels. An
    empty depth map yields an empty proposal set.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if cap is None:
        cap = max(1, grid_spec.num_voxels() // 4)
    if cap > grid_spec.num_voxels():
        raise ValueError("proposal cap exceeds voxel count")
    c = f_lss.features.shape[0]
    ii, jj = np.nonzero(depth > 0)
    if ii.size == 0:
        return QueryProposalSet(indices=np.zeros((0, 3), dtype=np.int64),
                                features=Tensor(np.zeros((0, c))))
    pts = pose.unproject(rig, ii, jj, depth[ii, jj])
    vox = np.floor(grid_spec.world_to_voxel(pts)).astype(np.int64)
    dims = np.array(grid_spec.dims)
    inb = np.all((vox >= 0) & (vox < dims), axis=1)
    vox, dist = vox[inb], depth[ii, jj][inb]

    order = np.argsort(dist, kind="stable")
    vox = vox[order]
    flat = np.ravel_multi_index((vox[:, 0], vox[:, 1], vox[:, 2]), grid_spec.dims)
    _, first = np.unique(flat, return_index=True)
    vox = vox[np.sort(first)]  # deduplicated, nearest-first
    vox = vox[:cap]
    flat_kept = np.ravel_multi_index((vox[:, 0], vox[:, 1], vox[:, 2]), grid_spec.dims)

    vol_rows = ad.reshape(ad.transpose(f_lss.features, (1, 2, 3, 0)), (grid_spec.num_voxels(), c))
    feats = ad.gather_rows(vol_rows, flat_kept)
    return QueryProposalSet(indices=vox, features=feats)


@dataclass
class RefineConfig:
    num_points: int = 4     # sampling points per query (K)
    num_rounds: int = 2
    max_offset: float = 2.0  # offsets clamped to +/- this many cells via tanh


class VoxelRefiner:
    """Deformable-style refinement: per query, predict offsets and weights,
    sample features trilinearly, residual-add; cross over the frustum then
    self over the scattered voxel volume, per round."""

    def __init__(self, channels: int, config: RefineConfig | None = None, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = channels
        self.config = config if config is not None else RefineConfig()
        k = self.config.num_points
        self.heads = []
        for r in range(self.config.num_rounds):
            for stage in ("cross", "self"):
                tag = f"refine.r{r}.{stage}"
                head = {
                    "off_w": Parameter(np.zeros((3 * k, channels)), name=f"{tag}.off_w"),
                    "off_b": Parameter(np.zeros(3 * k), name=f"{tag}.off_b"),
                    "wgt_w": Parameter(np.zeros((k, channels)), name=f"{tag}.wgt_w"),
                    "wgt_b": Parameter(np.zeros(k), name=f"{tag}.wgt_b"),
                    "val_w": Parameter(rng.standard_normal((channels, channels)) / np.sqrt(channels),
                                       name=f"{tag}.val_w"),
                    "val_b": Parameter(np.zeros(channels), name=f"{tag}.val_b"),
                }
                self.heads.append(head)

    def params(self) -> list[Parameter]:
        return [p for head in self.heads for p in head.values()]

    def _gather_deformable(self, head, queries: Tensor, base_coords: np.ndarray,
                           volume: Tensor) -> Tensor:
        """One deformable lookup: offsets and weights from the query feature,
        trilinear samples around base_coords, weighted sum, value projection."""
        nq = queries.shape[0]
        k = self.config.num_points
        raw_off = ad.matmul(queries, ad.transpose(head["off_w"], (1, 0))) + head["off_b"]
        offsets = ad.mul(ad.tanh(raw_off), self.config.max_offset)  # [Nq, 3K]
        weights = ad.softmax(ad.matmul(queries, ad.transpose(head["wgt_w"], (1, 0))) + head["wgt_b"], axis=-1)

        coords = ad.add(ad.reshape(offsets, (nq * k, 3)),
                        np.repeat(base_coords, k, axis=0))
        sampled = ad.trilinear_sample(volume, coords)  # [Nq*K, C]
        sampled = ad.reshape(sampled, (nq, k, self.channels))
        weighted = ad.tsum(ad.mul(sampled, ad.reshape(weights, (nq, k, 1))), axes=1)
        return ad.matmul(weighted, ad.transpose(head["val_w"], (1, 0))) + head["val_b"]

    def forward(self, proposals: QueryProposalSet, frustum: Frustum,
                grid_spec: GridSpec, rig: CameraRig, pose: CameraPose) -> FeatureVolume:
        """Refine proposal features and scatter them into a zero volume."""
        c = self.channels
        nv = grid_spec.num_voxels()
        if len(proposals) == 0:
            zero = Tensor(np.zeros((c,) + tuple(grid_spec.dims)))
            return FeatureVolume(features=zero, kind="vt")

        frustum_coords = self._frustum_coords(proposals.indices, grid_spec, rig, pose, frustum.bins)
        voxel_coords = proposals.indices.astype(np.float64)
        flat_idx = np.ravel_multi_index(
            (proposals.indices[:, 0], proposals.indices[:, 1], proposals.indices[:, 2]),
            grid_spec.dims)

        q = proposals.features
        for r in range(self.config.num_rounds):
            cross = self.heads[2 * r]
            own = self.heads[2 * r + 1]
            q = ad.add(q, self._gather_deformable(cross, q, frustum_coords, frustum.features))
            scattered = ad.scatter_add_rows(q, flat_idx, nv)
            volume = ad.transpose(ad.reshape(scattered, grid_spec.dims + (c,)), (3, 0, 1, 2))
            q = ad.add(q, self._gather_deformable(own, q, voxel_coords, volume))

        final = ad.scatter_add_rows(q, flat_idx, nv)
        volume = ad.transpose(ad.reshape(final, grid_spec.dims + (c,)), (3, 0, 1, 2))
        return FeatureVolume(features=volume, kind="vt")

    @staticmethod
    def _frustum_coords(indices: np.ndarray, grid_spec: GridSpec, rig: CameraRig,
                        pose: CameraPose, bins: DepthBinSpec) -> np.ndarray:
        """Continuous (bin, row, col) frustum coordinates of voxel centers.

        Voxels behind the camera or far outside the image project to clamped
        border coordinates, matching the sampler's border policy.
        """
        centers = grid_spec.voxel_centers(indices)
        rel = centers - pose.origin()
        cam = rel @ pose.rotation_matrix()  # inverse rotation
        z = np.maximum(cam[:, 2], 1e-6)
        u = rig.fx * cam[:, 0] / z + rig.cx
        v = rig.fy * cam[:, 1] / z + rig.cy
        dist = np.linalg.norm(rel, axis=1)
        bin_centers = bins.centers()
        b = np.interp(dist, bin_centers, np.arange(bins.num_bins, dtype=np.float64))
        return np.stack([b, v, u], axis=1)


def brute_force_lift_pool(context: np.ndarray, probs: np.ndarray,
                          points_3d: np.ndarray, grid_spec: GridSpec) -> np.ndarray:
    """Triple-loop reference for lift + voxel_pool, used as an oracle in tests."""
    c, h, w = context.shape
    d = probs.shape[0]
    out = np.zeros((c,) + tuple(grid_spec.dims))
    dims = grid_spec.dims
    for di in range(d):
        for i in range(h):
            for j in range(w):
                vox = np.floor(grid_spec.world_to_voxel(points_3d[di, i, j])).astype(np.int64)
                if np.all(vox >= 0) and np.all(vox < np.array(dims)):
                    out[:, vox[0], vox[1], vox[2]] += context[:, i, j] * probs[di, i, j]
    return out
