"""Disparity-volume to depth-distribution strategies.

Three interchangeable routes produce a per-pixel categorical depth
distribution from the stereo prior: a learned channel mapper with a shallow
3D refinement stack ("ddvm"), deterministic analytical resampling ("ar"), and
a one-hot encoding of the collapsed depth map ("onehot"). "refine-off" is the
learned route with the 3D refinement disabled, kept as a regression baseline.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

DEPTH_STRATEGIES = ("ddvm", "ar", "onehot", "refine-off")


@dataclass(frozen=True)
class DepthBinSpec:
    num_bins: int
    d_min: float
    d_max: float
    spacing: str = "uniform"  # or "linear-increasing"

    def __post_init__(self):
        if self.d_min <= 0 or self.d_max <= self.d_min:
            raise ValueError("need 0 < d_min < d_max")
        if self.spacing not in ("uniform", "linear-increasing"):
            raise ValueError(f"unknown spacing {self.spacing!r}")

    def edges(self) -> np.ndarray:
        if self.spacing == "uniform":
            return np.linspace(self.d_min, self.d_max, self.num_bins + 1)
        # widths grow linearly with bin index
        i = np.arange(1, self.num_bins + 1, dtype=np.float64)
        widths = 2.0 * (self.d_max - self.d_min) * i / (self.num_bins * (self.num_bins + 1))
        return self.d_min + np.concatenate([[0.0], np.cumsum(widths)])

    def centers(self) -> np.ndarray:
        e = self.edges()
        return 0.5 * (e[:-1] + e[1:])

    def bin_of(self, depth: np.ndarray) -> np.ndarray:
        """Index of the bin containing each depth, clamped to valid bins."""
        e = self.edges()
        idx = np.searchsorted(e, np.asarray(depth, dtype=np.float64), side="right") - 1
        return np.clip(idx, 0, self.num_bins - 1)


@dataclass(frozen=True)
class DisparityBinSpec:
    """Uniformly spaced disparity bin centers, stereo-matching convention."""

    num_bins: int
    min_disp: float
    max_disp: float

    def __post_init__(self):
        if self.min_disp <= 0 or self.max_disp <= self.min_disp:
            raise ValueError("need 0 < min_disp < max_disp")

    def centers(self) -> np.ndarray:
        return np.linspace(self.min_disp, self.max_disp, self.num_bins)


@dataclass
class DepthDistribution:
    """Per-pixel categorical distribution over depth bins, [D_depth, H, W]."""

    probs: Tensor
    edge_clamp_count: int = 0

    def numpy(self) -> np.ndarray:
        return self.probs.data

    def validate(self, tol: float = 1e-6) -> None:
        p = self.probs.data
        if np.any(p < -tol):
            raise ValueError("depth distribution has negative mass")
        sums = p.sum(axis=0)
        if np.max(np.abs(sums - 1.0)) > tol:
            raise ValueError(f"depth distribution columns not normalized (max dev {np.max(np.abs(sums - 1.0)):.2e})")


def _affine(rng, out_dim: int, in_dim: int, name: str, scale: float | None = None):
    s = scale if scale is not None else 1.0 / np.sqrt(in_dim)
    w = Parameter(s * rng.standard_normal((out_dim, in_dim)), name=f"{name}.w")
    b = Parameter(np.zeros(out_dim), name=f"{name}.b")
    return w, b


class ChannelMapper:
    """Stacked residual FFN blocks mapping disparity channels to depth channels.

    A lift affine takes D_disp to the working width, `num_blocks` pre-norm
    residual FFN blocks operate at that width, and a final affine maps to
    D_depth.
    """

    def __init__(self, d_disp: int, d_depth: int, num_blocks: int = 2,
                 width: int | None = None, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_disp = d_disp
        self.d_depth = d_depth
        self.width = width if width is not None else 2 * max(d_disp, d_depth)
        self.num_blocks = num_blocks
        self.lift_w, self.lift_b = _affine(rng, self.width, d_disp, "ddvm.lift")
        self.blocks = []
        for k in range(num_blocks):
            blk = {
                "ln_g": Parameter(np.ones(self.width), name=f"ddvm.blk{k}.ln_g"),
                "ln_b": Parameter(np.zeros(self.width), name=f"ddvm.blk{k}.ln_b"),
            }
            blk["w1"], blk["b1"] = _affine(rng, self.width, self.width, f"ddvm.blk{k}.ffn1")
            blk["w2"], blk["b2"] = _affine(rng, self.width, self.width, f"ddvm.blk{k}.ffn2")
            self.blocks.append(blk)
        self.out_w, self.out_b = _affine(rng, d_depth, self.width, "ddvm.out")

    def params(self) -> list[Parameter]:
        ps = [self.lift_w, self.lift_b, self.out_w, self.out_b]
        for blk in self.blocks:
            ps += [blk["ln_g"], blk["ln_b"], blk["w1"], blk["b1"], blk["w2"], blk["b2"]]
        return ps

    def forward(self, x: Tensor) -> Tensor:
        """x: [D_disp, N] -> [D_depth, N], affine maps act on the channel axis."""
        if x.shape[0] != self.d_disp:
            raise ad.DimensionError(f"channel mapper expects {self.d_disp} disparity bins, got {x.shape[0]}")
        h = ad.matmul(self.lift_w, x) + ad.reshape(self.lift_b, (self.width, 1))
        for blk in self.blocks:
            normed = ad.layernorm(h, 0, blk["ln_g"], blk["ln_b"])
            f = ad.matmul(blk["w1"], normed) + ad.reshape(blk["b1"], (self.width, 1))
            f = ad.matmul(blk["w2"], ad.relu(f)) + ad.reshape(blk["b2"], (self.width, 1))
            h = h + f
        return ad.matmul(self.out_w, h) + ad.reshape(self.out_b, (self.d_depth, 1))


class DepthRefiner:
    """Shallow 3D conv stack over the (depth, H, W) volume as a 1-channel grid."""

    def __init__(self, width: int = 8, kernel: int = 3, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        k3 = kernel ** 3
        self.w1 = Parameter(rng.standard_normal((width, 1, kernel, kernel, kernel)) / np.sqrt(k3),
                            name="ddvm.phi1.w")
        self.b1 = Parameter(np.zeros(width), name="ddvm.phi1.b")
        self.w2 = Parameter(rng.standard_normal((1, width, kernel, kernel, kernel)) / np.sqrt(width * k3),
                            name="ddvm.phi2.w")
        self.b2 = Parameter(np.zeros(1), name="ddvm.phi2.b")

    def params(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2]

    def forward(self, volume: Tensor) -> Tensor:
        """volume: [D_depth, H, W] -> refined [D_depth, H, W]."""
        x = ad.reshape(volume, (1,) + volume.shape)
        h = ad.relu(ad.conv3d(x, self.w1, self.b1))
        out = ad.conv3d(h, self.w2, self.b2)
        return ad.reshape(out, volume.shape)


def ddvm_forward(v_disp, mapper: ChannelMapper, phi: DepthRefiner | None,
                 bins: DepthBinSpec) -> DepthDistribution:
    """Learned disparity-to-depth mapping followed by softmax over depth bins."""
    x = v_disp if isinstance(v_disp, Tensor) else Tensor(v_disp)
    if x.ndim != 3:
        raise ad.DimensionError(f"expected [D_disp, H, W], got {x.shape}")
    if mapper.d_depth != bins.num_bins:
        raise ad.DimensionError(f"mapper emits {mapper.d_depth} bins but spec has {bins.num_bins}")
    d_disp, h, w = x.shape
    flat = ad.reshape(x, (d_disp, h * w))
    mapped = mapper.forward(flat)
    volume = ad.reshape(mapped, (bins.num_bins, h, w))
    if phi is not None:
        volume = phi.forward(volume)
    return DepthDistribution(probs=ad.softmax(volume, axis=0))


def resample_matrix(rig, disp_bins: DisparityBinSpec, depth_bins: DepthBinSpec):
    """Transport matrix [D_depth, D_disp] moving disparity mass to depth bins.

    Each disparity bin center maps to depth fx*b/d and is split linearly
    between the two nearest depth-bin centers; out-of-range depths are clamped
    to the edge bin. Returns (matrix, clamp_count).
    """
    d_centers = disp_bins.centers()
    z_centers = depth_bins.centers()
    t = np.zeros((depth_bins.num_bins, disp_bins.num_bins))
    clamped = 0
    for k, d in enumerate(d_centers):
        z = rig.fx * rig.baseline_m / d
        if z <= z_centers[0]:
            t[0, k] = 1.0
            clamped += int(z < z_centers[0])
        elif z >= z_centers[-1]:
            t[-1, k] = 1.0
            clamped += int(z > z_centers[-1])
        else:
            hi = int(np.searchsorted(z_centers, z))
            lo = hi - 1
            frac = (z - z_centers[lo]) / (z_centers[hi] - z_centers[lo])
            t[lo, k] = 1.0 - frac
            t[hi, k] = frac
    return t, clamped


def analytical_resample(v_disp: np.ndarray, rig, disp_bins: DisparityBinSpec,
                        depth_bins: DepthBinSpec) -> DepthDistribution:
    """Deterministic mass reassignment from disparity bins to depth bins."""
    v = np.asarray(v_disp, dtype=np.float64)
    t, clamped = resample_matrix(rig, disp_bins, depth_bins)
    moved = np.einsum("dk,khw->dhw", t, v)
    total = moved.sum(axis=0, keepdims=True)
    moved = moved / np.where(total > 0, total, 1.0)
    return DepthDistribution(probs=Tensor(moved), edge_clamp_count=clamped)


def onehot_from_depthmap(depth: np.ndarray, bins: DepthBinSpec) -> DepthDistribution:
    """One-hot distribution at the bin containing each depth; uniform on no hit."""
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    probs = np.zeros((bins.num_bins, h, w))
    hit = depth > 0
    idx = bins.bin_of(depth)
    ii, jj = np.nonzero(hit)
    probs[idx[ii, jj], ii, jj] = 1.0
    probs[:, ~hit] = 1.0 / bins.num_bins
    return DepthDistribution(probs=Tensor(probs))


def expected_depth(dist: DepthDistribution, bins: DepthBinSpec) -> np.ndarray:
    """Mean of bin centers under the distribution, [H, W]."""
    centers = bins.centers()
    return np.einsum("d,dhw->hw", centers, dist.numpy())
