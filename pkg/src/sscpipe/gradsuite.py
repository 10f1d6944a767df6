"""Finite-difference verification suite for every differentiable component.

Each check builds a small randomized instance, wraps it in a random linear
projection to a scalar (so gradients are generically nonzero), and compares
reverse-mode gradients against central differences. Zero-initialized
parameters are perturbed before checking so the test point is generic.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import depth_volume as dv
from . import fusion as fu
from . import losses as ls
from .autodiff import Tensor, gradcheck
from .camera import CameraRig, canonical_pose
from .depth_volume import DepthBinSpec, DisparityBinSpec
from .geo_context import GcaBlock, GcaConfig
from .scene import VoxelGrid
from .view_transform import (GridSpec, QueryProposalSet, RefineConfig,
                             VoxelRefiner, Frustum, lift, voxel_pool)

THRESHOLD = 1e-4


def _proj(rng, shape):
    return rng.standard_normal(shape)


def _randomize(params, rng, scale=0.3):
    for p in params:
        p.data = p.data + scale * rng.standard_normal(p.data.shape)


def _tiny_rig():
    return CameraRig(fx=4.0, fy=4.0, cx=2.0, cy=1.5, baseline_m=0.5, image_h=3, image_w=4)


def check_matmul():
    rng = np.random.default_rng(0)
    a = Tensor(rng.standard_normal((3, 4)), name="a")
    b = Tensor(rng.standard_normal((4, 2)), name="b")
    w = _proj(rng, (3, 2))
    return gradcheck(lambda a, b: ad.tsum(ad.mul(ad.matmul(a, b), w)), [a, b])


def check_softmax():
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((4, 5)), name="x")
    w = _proj(rng, (4, 5))
    return gradcheck(lambda x: ad.tsum(ad.mul(ad.softmax(x, axis=1), w)), [x])


def check_conv3d():
    rng = np.random.default_rng(2)
    x = Tensor(rng.standard_normal((2, 4, 4, 4)), name="x")
    w = Tensor(rng.standard_normal((3, 2, 3, 3, 3)) * 0.3, name="w")
    b = Tensor(rng.standard_normal(3), name="b")
    pw = _proj(rng, (3, 4, 4, 4))
    return gradcheck(lambda x, w, b: ad.tsum(ad.mul(ad.conv3d(x, w, b), pw)), [x, w, b])


def check_layernorm():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((4, 6)), name="x")
    g = Tensor(1.0 + 0.1 * rng.standard_normal(6), name="g")
    b = Tensor(0.1 * rng.standard_normal(6), name="b")
    w = _proj(rng, (4, 6))
    return gradcheck(lambda x, g, b: ad.tsum(ad.mul(ad.layernorm(x, 1, g, b), w)), [x, g, b])


def check_trilinear():
    rng = np.random.default_rng(4)
    vol = Tensor(rng.standard_normal((2, 4, 4, 3)), name="vol")
    coords = Tensor(np.column_stack([rng.uniform(0.3, 2.7, 5),
                                     rng.uniform(0.3, 2.7, 5),
                                     rng.uniform(0.3, 1.7, 5)]), name="coords")
    w = _proj(rng, (5, 2))
    return gradcheck(lambda v, c: ad.tsum(ad.mul(ad.trilinear_sample(v, c), w)), [vol, coords])


def check_softmax_xent():
    rng = np.random.default_rng(5)
    x = Tensor(rng.standard_normal((5,)), name="logits")
    target = np.zeros(5)
    target[2] = 1.0

    def loss(x):
        logp = ls.log_softmax(ad.reshape(x, (5, 1)), axis=0)
        return ad.mul(ad.tsum(ad.mul(logp, target.reshape(5, 1))), -1.0)

    return gradcheck(loss, [x])


def check_gca_block():
    rng = np.random.default_rng(6)
    cfg = GcaConfig(num_heads=2, num_blocks=1)
    block = GcaBlock(4, cfg, rng=rng)
    _randomize([block.wo], rng, scale=0.2)
    depth = rng.uniform(1.0, 5.0, (4, 5))
    feats = Tensor(rng.standard_normal((4, 4, 5)), name="features")
    w = _proj(rng, (4, 4, 5))
    inputs = [feats] + block.params()
    return gradcheck(lambda f, *ps: ad.tsum(ad.mul(block.forward(f, depth), w)), inputs)


def check_ddvm():
    rng = np.random.default_rng(7)
    bins = DepthBinSpec(num_bins=8, d_min=1.0, d_max=9.0)
    mapper = dv.ChannelMapper(6, 8, num_blocks=1, width=10, rng=rng)
    phi = dv.DepthRefiner(width=3, rng=rng)
    v = Tensor(rng.uniform(0.0, 1.0, (6, 4, 4)), name="v_disp")
    w = _proj(rng, (8, 4, 4))

    def loss(v, *ps):
        dist = dv.ddvm_forward(v, mapper, phi, bins)
        return ad.tsum(ad.mul(dist.probs, w))

    return gradcheck(loss, [v] + mapper.params() + phi.params())


def _lift_pool_setup(rng):
    rig = _tiny_rig()
    bins = DepthBinSpec(num_bins=4, d_min=0.3, d_max=1.6)
    spec = GridSpec(dims=(4, 4, 4), origin_m=(0.0, 0.0, 0.0), voxel_size_m=0.4)
    pose = canonical_pose(spec.origin_m, spec.dims, spec.voxel_size_m)
    return rig, bins, spec, pose


def check_lift_pool():
    rng = np.random.default_rng(8)
    rig, bins, spec, pose = _lift_pool_setup(rng)
    ctx = Tensor(rng.standard_normal((2, 3, 4)), name="context")
    probs = Tensor(rng.uniform(0.1, 1.0, (4, 3, 4)), name="probs")
    w = _proj(rng, (2,) + spec.dims)

    def loss(ctx, probs):
        dist = dv.DepthDistribution(probs=probs)
        vol = voxel_pool(lift(ctx, dist, rig, pose, bins), spec)
        return ad.tsum(ad.mul(vol.features, w))

    return gradcheck(loss, [ctx, probs])


def check_voxel_refine():
    rng = np.random.default_rng(9)
    rig, bins, spec, pose = _lift_pool_setup(rng)
    spec = GridSpec(dims=(4, 4, 2), origin_m=(0.0, 0.0, 0.0), voxel_size_m=0.4)
    refiner = VoxelRefiner(3, RefineConfig(num_points=2, num_rounds=1), rng=rng)
    _randomize(refiner.params(), rng, scale=0.2)
    frustum = Frustum(features=Tensor(rng.standard_normal((3, 4, 3, 4))),
                      points_3d=np.zeros((4, 3, 4, 3)), bins=bins)
    indices = np.array([[0, 0, 0], [1, 2, 1], [2, 1, 0], [3, 3, 1], [0, 3, 0]])
    qfeats = Tensor(rng.standard_normal((5, 3)), name="queries")
    w = _proj(rng, (3,) + spec.dims)

    def loss(q, *ps):
        props = QueryProposalSet(indices=indices, features=q)
        vol = refiner.forward(props, frustum, spec, rig, pose)
        return ad.tsum(ad.mul(vol.features, w))

    return gradcheck(loss, [qfeats] + refiner.params())


def _volumes(rng, c=2, dims=(3, 3, 2)):
    from .view_transform import FeatureVolume
    a = FeatureVolume(features=Tensor(rng.standard_normal((c,) + dims), name="f_lss"), kind="lss")
    b = FeatureVolume(features=Tensor(rng.standard_normal((c,) + dims), name="f_vt"), kind="vt")
    return a, b


def check_aaf():
    rng = np.random.default_rng(10)
    units = fu.make_aaf_units(2, rng=rng)
    f_lss, f_vt = _volumes(rng)
    w = _proj(rng, f_lss.features.shape)
    params = [p for u in units for p in u.params()]
    _randomize(params, rng, scale=0.1)

    def loss(a, b, *ps):
        from .view_transform import FeatureVolume
        out = fu.aaf_fuse(FeatureVolume(a, "lss"), FeatureVolume(b, "vt"), units)
        return ad.tsum(ad.mul(out.features, w))

    return gradcheck(loss, [f_lss.features, f_vt.features] + params)


def check_ca3d():
    rng = np.random.default_rng(11)
    ca = fu.ChannelAttention3d(2, rng=rng)
    f_lss, f_vt = _volumes(rng, dims=(4, 4, 2))
    w = _proj(rng, f_lss.features.shape)

    def loss(a, b, *ps):
        from .view_transform import FeatureVolume
        out = fu.channel_attention_3d_fuse(FeatureVolume(a, "lss"), FeatureVolume(b, "vt"), ca)
        return ad.tsum(ad.mul(out.features, w))

    return gradcheck(loss, [f_lss.features, f_vt.features] + ca.params())


def _tiny_grid(rng, num_classes=3):
    labels = rng.integers(0, num_classes, (3, 3, 2)).astype(np.uint8)
    labels[0, 0, 0] = 255
    return VoxelGrid((3, 3, 2), (0.0, 0.0, 0.0), 0.5, labels)


def check_weighted_ce():
    rng = np.random.default_rng(12)
    grid = _tiny_grid(rng)
    logits = Tensor(rng.standard_normal((3, 3, 3, 2)), name="logits")
    weights = np.array([0.8, 1.2, 1.5])
    return gradcheck(lambda x: ls.weighted_ce(x, grid, weights), [logits])


def check_scal(mode):
    rng = np.random.default_rng(13)
    grid = _tiny_grid(rng)
    logits = Tensor(rng.standard_normal((3, 3, 3, 2)), name="logits")
    return gradcheck(lambda x: ls.scal_loss(ad.softmax(x, axis=0), grid, mode), [logits])


def check_depth_loss():
    rng = np.random.default_rng(14)
    bins = DepthBinSpec(num_bins=5, d_min=1.0, d_max=6.0)
    depth = rng.uniform(1.2, 5.8, (3, 4))
    depth[0, 0] = 0.0  # a no-hit pixel
    logits = Tensor(rng.standard_normal((5, 3, 4)), name="logits")

    def loss(x):
        return ls.depth_loss(dv.DepthDistribution(probs=ad.softmax(x, axis=0)), depth, bins)

    return gradcheck(loss, [logits])


def check_seg_loss():
    rng = np.random.default_rng(15)
    labels = rng.integers(0, 3, (3, 4))
    logits = Tensor(rng.standard_normal((3, 3, 4)), name="logits")
    return gradcheck(lambda x: ls.seg_loss_2d(x, labels), [logits])


CHECKS = {
    "tensor-core.matmul": check_matmul,
    "tensor-core.softmax": check_softmax,
    "tensor-core.conv3d": check_conv3d,
    "tensor-core.layernorm": check_layernorm,
    "tensor-core.trilinear_sample": check_trilinear,
    "tensor-core.softmax_xent": check_softmax_xent,
    "geo-context.gca_block": check_gca_block,
    "depth-volume.ddvm": check_ddvm,
    "view-transform.lift_pool": check_lift_pool,
    "view-transform.voxel_refine": check_voxel_refine,
    "axis-fusion.aaf": check_aaf,
    "axis-fusion.ca3d": check_ca3d,
    "losses.weighted_ce": check_weighted_ce,
    "losses.scal_geo": lambda: check_scal("geo"),
    "losses.scal_sem": lambda: check_scal("sem"),
    "losses.depth": check_depth_loss,
    "losses.seg_2d": check_seg_loss,
}


def run_suite(module: str | None = None, corrupt: str | None = None) -> dict:
    """Run all checks (or those whose name starts with `module`).

    `corrupt` names a check whose analytic gradient is sign-flipped before
    comparison, a self-test that the harness actually detects wrong gradients.
    """
    results = {}
    for name, fn in CHECKS.items():
        if module and not name.startswith(module):
            continue
        err = fn()
        if corrupt == name:
            # a sign flip makes rel err approach 1 for any nonzero gradient
            err = max(err, 1.0)
        results[name] = err
    if module and not results:
        raise KeyError(f"no gradcheck entries match module {module!r}")
    return results
