"""Pinhole stereo rig and camera pose in the voxel-grid frame."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class CameraRig:
    """Pinhole intrinsics plus stereo baseline for an H x W feature map."""

    fx: float
    fy: float
    cx: float
    cy: float
    baseline_m: float
    image_h: int
    image_w: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0 or self.baseline_m <= 0:
            raise ConfigurationError("fx, fy and baseline_m must be positive")
        if not (0 <= self.cx < self.image_w and 0 <= self.cy < self.image_h):
            raise ConfigurationError("principal point must lie inside the image")

    def ray_directions(self) -> np.ndarray:
        """Unit ray direction per pixel in camera frame, shape [H, W, 3].

        Camera frame: x right (columns), y down (rows), z forward.
        """
        j = np.arange(self.image_w, dtype=np.float64)
        i = np.arange(self.image_h, dtype=np.float64)
        xx = (j[None, :] - self.cx) / self.fx
        yy = (i[:, None] - self.cy) / self.fy
        dirs = np.stack([np.broadcast_to(xx, (self.image_h, self.image_w)),
                         np.broadcast_to(yy, (self.image_h, self.image_w)),
                         np.ones((self.image_h, self.image_w))], axis=-1)
        return dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)

    def disparity_from_depth(self, depth: np.ndarray) -> np.ndarray:
        """d = fx * baseline / depth; the no-hit sentinel 0 is propagated."""
        depth = np.asarray(depth, dtype=np.float64)
        out = np.zeros_like(depth)
        hit = depth > 0
        out[hit] = self.fx * self.baseline_m / depth[hit]
        return out

    def depth_from_disparity(self, disparity: np.ndarray) -> np.ndarray:
        disparity = np.asarray(disparity, dtype=np.float64)
        out = np.zeros_like(disparity)
        hit = disparity > 0
        out[hit] = self.fx * self.baseline_m / disparity[hit]
        return out


@dataclass(frozen=True)
class CameraPose:
    """Camera-to-grid rigid transform: p_grid = rotation @ p_cam + position."""

    rotation: tuple  # 3x3 row-major tuple of tuples
    position: tuple  # 3-vector, grid-frame meters

    def __post_init__(self):
        r = self.rotation_matrix()
        fwd = r[:, 2]
        if np.linalg.norm(fwd) < 1e-12:
            raise ConfigurationError("degenerate pose: zero forward vector")

    def rotation_matrix(self) -> np.ndarray:
        return np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)

    def origin(self) -> np.ndarray:
        return np.asarray(self.position, dtype=np.float64)

    def rays_to_grid(self, rig: CameraRig) -> np.ndarray:
        """Per-pixel unit directions rotated into the grid frame, [H, W, 3]."""
        dirs = rig.ray_directions()
        return dirs @ self.rotation_matrix().T

    def unproject(self, rig: CameraRig, i, j, depth) -> np.ndarray:
        """Grid-frame 3D point(s) at ray distance `depth` for pixel (row i, col j)."""
        x = (np.asarray(j, dtype=np.float64) - rig.cx) / rig.fx
        y = (np.asarray(i, dtype=np.float64) - rig.cy) / rig.fy
        d = np.stack([x, y, np.ones_like(x)], axis=-1)
        d = d / np.linalg.norm(d, axis=-1, keepdims=True)
        return self.origin() + np.asarray(depth, dtype=np.float64)[..., None] * (d @ self.rotation_matrix().T)


def canonical_pose(origin_m, dims, voxel_size_m: float) -> CameraPose:
    """Forward-facing pose: camera at the low-X grid face, looking along +X.

    Camera x (image right) maps to grid +Y, camera y (image down) to grid -Z,
    camera z (forward) to grid +X. Mimics a forward-facing driving setup.
    """
    origin = np.asarray(origin_m, dtype=np.float64)
    extent = np.asarray(dims, dtype=np.float64) * voxel_size_m
    position = (origin[0],
                origin[1] + 0.5 * extent[1],
                origin[2] + 0.75 * extent[2])
    # columns are the images of camera basis vectors in the grid frame
    rotation = ((0.0, 0.0, 1.0),
                (1.0, 0.0, 0.0),
                (0.0, -1.0, 0.0))
    return CameraPose(rotation=rotation, position=tuple(float(v) for v in position))
