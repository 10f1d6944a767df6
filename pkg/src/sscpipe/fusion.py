"""Fusing the two 3D feature volumes.

Three interchangeable strategies behind one interface: "aaf" (three parallel
axis-specific gating units, each mixing a local 3D-conv pathway with an
anisotropically pooled global pathway, outputs summed), "ca3d" (a single
isotropic channel-attention gate) and "none" (pass the refined volume
through untouched).
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .view_transform import FeatureVolume

FUSION_STRATEGIES = ("aaf", "ca3d", "none")

# volume layout is [C, X, Y, Z]; per axis, the two pooled plane axes
_PLANE_AXES = {"X": (2, 3), "Y": (1, 3), "Z": (1, 2)}


class AafUnit:
    """Gating unit for one axis: sigmoid(local conv path + broadcast global path)."""

    def __init__(self, axis: str, channels: int, rng=None, gate_bias: float = 0.0):
        if axis not in _PLANE_AXES:
            raise ValueError(f"axis must be X, Y or Z, got {axis!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.axis = axis
        self.channels = channels
        r = max(1, channels // 2)
        tag = f"aaf.{axis}"
        self.conv1_w = Parameter(rng.standard_normal((r, channels, 3, 3, 3)) / np.sqrt(27 * channels),
                                 name=f"{tag}.conv1.w")
        self.conv1_b = Parameter(np.zeros(r), name=f"{tag}.conv1.b")
        self.conv2_w = Parameter(rng.standard_normal((channels, r, 1, 1, 1)) / np.sqrt(r),
                                 name=f"{tag}.conv2.w")
        self.conv2_b = Parameter(np.full(channels, gate_bias), name=f"{tag}.conv2.b")
        self.mlp1_w = Parameter(rng.standard_normal((channels, channels)) / np.sqrt(channels),
                                name=f"{tag}.mlp1.w")
        self.mlp1_b = Parameter(np.zeros(channels), name=f"{tag}.mlp1.b")
        self.mlp2_w = Parameter(rng.standard_normal((channels, channels)) / np.sqrt(channels),
                                name=f"{tag}.mlp2.w")
        self.mlp2_b = Parameter(np.zeros(channels), name=f"{tag}.mlp2.b")

    def params(self) -> list[Parameter]:
        return [self.conv1_w, self.conv1_b, self.conv2_w, self.conv2_b,
                self.mlp1_w, self.mlp1_b, self.mlp2_w, self.mlp2_b]

    def gate_logits(self, joint: Tensor) -> Tensor:
        """Pre-sigmoid gate over [C, X, Y, Z] from the joint descriptor."""
        local = ad.conv3d(joint, self.conv1_w, self.conv1_b)
        local = ad.conv3d(ad.relu(local), self.conv2_w, self.conv2_b)

        pooled = mean_over_plane(joint, self.axis)  # [C, L] profile on the surviving axis
        h = ad.relu(ad.matmul(self.mlp1_w, pooled) + ad.reshape(self.mlp1_b, (self.channels, 1)))
        g = ad.matmul(self.mlp2_w, h) + ad.reshape(self.mlp2_b, (self.channels, 1))
        shape = [self.channels, 1, 1, 1]
        axis_idx = {"X": 1, "Y": 2, "Z": 3}[self.axis]
        shape[axis_idx] = joint.shape[axis_idx]
        return ad.add(local, ad.reshape(g, tuple(shape)))

    def gate(self, joint: Tensor) -> Tensor:
        return ad.sigmoid(self.gate_logits(joint))

    def fuse(self, f_lss: Tensor, f_vt: Tensor, gate: Tensor | None = None) -> Tensor:
        joint = ad.add(f_lss, f_vt)
        sigma = gate if gate is not None else self.gate(joint)
        return ad.add(ad.mul(sigma, f_lss), ad.mul(ad.add(ad.mul(sigma, -1.0), 1.0), f_vt))


def mean_over_plane(x: Tensor, axis: str) -> Tensor:
    """Mean-pool a [C, X, Y, Z] volume over the two plane axes of `axis`,
    keeping a [C, L] profile along the surviving spatial axis."""
    return ad.mean(x, axes=_PLANE_AXES[axis])


def make_aaf_units(channels: int, rng=None) -> list[AafUnit]:
    rng = rng if rng is not None else np.random.default_rng(0)
    return [AafUnit(axis, channels, rng=rng) for axis in ("X", "Y", "Z")]


def aaf_fuse(f_lss: FeatureVolume, f_vt: FeatureVolume, units: list[AafUnit],
             forced_gates: list[Tensor] | None = None) -> FeatureVolume:
    """Sum of the three per-axis convex combinations of the two volumes.

    `forced_gates` substitutes the computed gate tensors directly, used by
    the gate-symmetry and limit tests.
    """
    _check_pair(f_lss, f_vt)
    out = None
    for i, unit in enumerate(units):
        gate = forced_gates[i] if forced_gates is not None else None
        fused = unit.fuse(f_lss.features, f_vt.features, gate=gate)
        out = fused if out is None else ad.add(out, fused)
    return FeatureVolume(features=out, kind="fused")


class ChannelAttention3d:
    """Isotropic baseline: one gate per channel from a global mean descriptor."""

    def __init__(self, channels: int, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        hidden = max(1, channels // 2)
        self.channels = channels
        self.w1 = Parameter(rng.standard_normal((hidden, channels)) / np.sqrt(channels), name="ca3d.w1")
        self.b1 = Parameter(np.zeros(hidden), name="ca3d.b1")
        self.w2 = Parameter(rng.standard_normal((channels, hidden)) / np.sqrt(hidden), name="ca3d.w2")
        self.b2 = Parameter(np.zeros(channels), name="ca3d.b2")

    def params(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2]

    def gate(self, joint: Tensor) -> Tensor:
        desc = ad.reshape(ad.mean(joint, axes=(1, 2, 3)), (self.channels, 1))
        h = ad.relu(ad.matmul(self.w1, desc) + ad.reshape(self.b1, (self.b1.shape[0], 1)))
        g = ad.matmul(self.w2, h) + ad.reshape(self.b2, (self.channels, 1))
        return ad.sigmoid(ad.reshape(g, (self.channels, 1, 1, 1)))


def channel_attention_3d_fuse(f_lss: FeatureVolume, f_vt: FeatureVolume,
                              ca: ChannelAttention3d, forced_gate: Tensor | None = None) -> FeatureVolume:
    _check_pair(f_lss, f_vt)
    sigma = forced_gate if forced_gate is not None else ca.gate(ad.add(f_lss.features, f_vt.features))
    fused = ad.add(ad.mul(sigma, f_lss.features),
                   ad.mul(ad.add(ad.mul(sigma, -1.0), 1.0), f_vt.features))
    return FeatureVolume(features=fused, kind="fused")


def passthrough_fuse(f_lss: FeatureVolume, f_vt: FeatureVolume) -> FeatureVolume:
    """Strategy "none": the splatted volume is ignored entirely."""
    return FeatureVolume(features=f_vt.features, kind="fused")


def _check_pair(f_lss: FeatureVolume, f_vt: FeatureVolume) -> None:
    if f_lss.features.shape != f_vt.features.shape:
        raise ad.DimensionError(
            f"volume shapes differ: {f_lss.features.shape} vs {f_vt.features.shape}")
