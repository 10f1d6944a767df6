"""Depth distribution routes: learned mapping, analytic resampling, one-hot."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sscpipe.autodiff import Tensor
from sscpipe.camera import CameraRig
from sscpipe.depth_volume import (ChannelMapper, DepthBinSpec, DepthRefiner,
                                  DisparityBinSpec, analytical_resample,
                                  ddvm_forward, expected_depth,
                                  onehot_from_depthmap, resample_matrix)

RIG = CameraRig(fx=6.0, fy=6.0, cx=6.0, cy=3.0, baseline_m=0.5, image_h=6, image_w=12)
DEPTH = DepthBinSpec(num_bins=8, d_min=0.4, d_max=4.0)
DISP = DisparityBinSpec(num_bins=10, min_disp=1.0, max_disp=7.0)


def _random_volume(rng, d, h, w):
    x = rng.uniform(0.1, 1.0, (d, h, w))
    return x / x.sum(axis=0, keepdims=True)


# -- bin specs -------------------------------------------------------------------

def test_uniform_edges_and_bin_of():
    e = DEPTH.edges()
    assert e[0] == 0.4 and e[-1] == 4.0
    assert np.allclose(np.diff(e), 0.45)
    assert DEPTH.bin_of(np.array(0.41)) == 0
    assert DEPTH.bin_of(np.array(3.99)) == 7
    assert DEPTH.bin_of(np.array(0.0)) == 0      # clamped below
    assert DEPTH.bin_of(np.array(99.0)) == 7     # clamped above


def test_linear_increasing_edges():
    spec = DepthBinSpec(num_bins=6, d_min=1.0, d_max=7.0, spacing="linear-increasing")
    e = spec.edges()
    widths = np.diff(e)
    assert np.isclose(e[0], 1.0) and np.isclose(e[-1], 7.0)
    assert np.all(np.diff(widths) > 0)  # strictly growing widths


def test_bin_spec_validation():
    with pytest.raises(ValueError):
        DepthBinSpec(num_bins=4, d_min=0.0, d_max=1.0)
    with pytest.raises(ValueError):
        DepthBinSpec(num_bins=4, d_min=2.0, d_max=1.0)
    with pytest.raises(ValueError):
        DepthBinSpec(num_bins=4, d_min=1.0, d_max=2.0, spacing="log")
    with pytest.raises(ValueError):
        DisparityBinSpec(num_bins=4, min_disp=0.0, max_disp=1.0)


@settings(max_examples=30, deadline=None)
@given(st.floats(min_value=0.45, max_value=3.95))
def test_bin_of_contains_depth(z):
    idx = int(DEPTH.bin_of(np.asarray(z)))
    e = DEPTH.edges()
    assert e[idx] <= z <= e[idx + 1] + 1e-12


# -- learned route -----------------------------------------------------------------

def test_ddvm_uniform_at_init():
    """Zero-initialized final affine and refiner second layer give the uniform
    distribution regardless of input."""
    rng = np.random.default_rng(0)
    mapper = ChannelMapper(DISP.num_bins, DEPTH.num_bins, rng=rng)
    mapper.out_w.data = np.zeros_like(mapper.out_w.data)
    phi = DepthRefiner(rng=rng)
    phi.w2.data = np.zeros_like(phi.w2.data)
    v = _random_volume(rng, DISP.num_bins, 3, 4)
    dist = ddvm_forward(v, mapper, phi, DEPTH)
    assert np.allclose(dist.numpy(), 1.0 / DEPTH.num_bins)


def test_ddvm_output_is_distribution():
    rng = np.random.default_rng(1)
    mapper = ChannelMapper(DISP.num_bins, DEPTH.num_bins, rng=rng)
    phi = DepthRefiner(rng=rng)
    for seed in range(5):
        v = _random_volume(np.random.default_rng(seed), DISP.num_bins, 4, 6)
        dist = ddvm_forward(v, mapper, phi, DEPTH)
        dist.validate(tol=1e-6)


def test_ddvm_dimension_errors():
    rng = np.random.default_rng(0)
    mapper = ChannelMapper(DISP.num_bins, DEPTH.num_bins, rng=rng)
    from sscpipe.autodiff import DimensionError
    with pytest.raises(DimensionError):
        ddvm_forward(np.zeros((3, 4)), mapper, None, DEPTH)
    with pytest.raises(DimensionError):
        ddvm_forward(np.zeros((DISP.num_bins + 1, 2, 2)), mapper, None, DEPTH)


# -- analytic resampling --------------------------------------------------------------

def test_resample_matrix_conserves_mass_per_column():
    t, clamped = resample_matrix(RIG, DISP, DEPTH)
    assert t.shape == (DEPTH.num_bins, DISP.num_bins)
    assert np.allclose(t.sum(axis=0), 1.0)  # every disparity bin fully reassigned
    assert clamped >= 0


def test_resample_matrix_maps_disparity_to_fxb_over_d():
    t, _ = resample_matrix(RIG, DISP, DEPTH)
    centers_z = DEPTH.centers()
    for k, d in enumerate(DISP.centers()):
        z = RIG.fx * RIG.baseline_m / d
        reconstructed = float(t[:, k] @ centers_z)
        if centers_z[0] < z < centers_z[-1]:
            assert abs(reconstructed - z) < 1e-9  # linear split is exact in expectation
        else:
            assert reconstructed in (centers_z[0], centers_z[-1])


def test_analytical_resample_mass_and_clamp_count():
    rng = np.random.default_rng(2)
    v = _random_volume(rng, DISP.num_bins, 4, 5)
    dist = analytical_resample(v, RIG, DISP, DEPTH)
    dist.validate(tol=1e-9)
    # clamp count equals the number of disparity centers outside the depth range
    z = RIG.fx * RIG.baseline_m / DISP.centers()
    c = DEPTH.centers()
    expect = int(np.sum((z < c[0]) | (z > c[-1])))
    assert dist.edge_clamp_count == expect


def test_analytical_resample_at_most_two_bins_for_peaked_input():
    v = np.zeros((DISP.num_bins, 1, 1))
    v[4, 0, 0] = 1.0
    dist = analytical_resample(v, RIG, DISP, DEPTH)
    assert np.count_nonzero(dist.numpy()[:, 0, 0]) <= 2


# -- one-hot route -----------------------------------------------------------------

def test_onehot_from_depthmap():
    depth = np.array([[1.0, 0.0], [3.9, 0.5]])
    dist = onehot_from_depthmap(depth, DEPTH)
    p = dist.numpy()
    dist.validate()
    assert p[int(DEPTH.bin_of(np.asarray(1.0))), 0, 0] == 1.0
    assert np.allclose(p[:, 0, 1], 1.0 / DEPTH.num_bins)  # no-hit pixel: uniform
    assert p[7, 1, 0] == 1.0
    assert p[0, 1, 1] == 1.0


def test_expected_depth_of_onehot_is_bin_center():
    depth = np.array([[1.0]])
    dist = onehot_from_depthmap(depth, DEPTH)
    idx = int(DEPTH.bin_of(np.asarray(1.0)))
    assert np.isclose(expected_depth(dist, DEPTH)[0, 0], DEPTH.centers()[idx])


def test_expected_depth_linearity():
    rng = np.random.default_rng(3)
    v = _random_volume(rng, DEPTH.num_bins, 2, 2)
    from sscpipe.depth_volume import DepthDistribution
    dist = DepthDistribution(probs=Tensor(v))
    expect = np.einsum("d,dhw->hw", DEPTH.centers(), v)
    assert np.allclose(expected_depth(dist, DEPTH), expect)
