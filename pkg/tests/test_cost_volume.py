import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from hybridstereo.cost_volume import build_feature_volume, soft_argmax_projection, upsample_disparity
from hybridstereo.errors import NumericError
from oracles import (
    bilinear_upsample_pixel,
    central_fd_gradient,
    feature_volume_loops,
    relative_error,
    soft_argmax_pixel,
)


@given(
    st.integers(1, 2),
    st.integers(1, 3),
    st.integers(1, 4),
    st.integers(1, 7),
    st.integers(1, 9),
    st.integers(0, 2**16),
)
def test_volume_matches_nested_loops(b, c, h, w, d_bins, seed):
    g = torch.Generator().manual_seed(seed)
    fl = torch.randn(b, c, h, w, generator=g)
    fr = torch.randn(b, c, h, w, generator=g)
    vol = build_feature_volume(fl, fr, d_bins)
    ref = feature_volume_loops(fl.numpy(), fr.numpy(), d_bins)
    torch.testing.assert_close(vol, torch.from_numpy(ref).float(), rtol=0, atol=0)


def test_volume_shape_and_zero_fill():
    fl, fr = torch.ones(1, 2, 3, 5), torch.ones(1, 2, 3, 5)
    vol = build_feature_volume(fl, fr, 4)
    assert vol.shape == (1, 4, 4, 3, 5)
    assert vol[0, 2:, 3, :, :3].abs().sum() == 0
    assert (vol[0, :2] == 1).all()


def test_volume_rejects_mismatched_features():
    with pytest.raises(ValueError):
        build_feature_volume(torch.zeros(1, 2, 3, 4), torch.zeros(1, 2, 3, 5), 2)


def test_soft_argmax_matches_pixel_oracle(rng):
    cost = rng.normal(size=(2, 6, 3, 4)) * 3
    out = soft_argmax_projection(torch.from_numpy(cost))
    for b, y, x in np.ndindex(2, 3, 4):
        assert float(out[b, y, x]) == pytest.approx(soft_argmax_pixel(cost[b, :, y, x]), abs=1e-12)


def test_soft_argmax_peaked_cost_gives_bin():
    cost = torch.full((1, 8, 1, 1), 1e4, dtype=torch.float64)
    cost[0, 5] = 0.0
    assert float(soft_argmax_projection(cost)) == pytest.approx(5.0, abs=1e-12)


@given(st.integers(1, 12), st.floats(0.1, 100.0), st.integers(0, 2**16))
def test_soft_argmax_bounded(d, scale, seed):
    g = torch.Generator().manual_seed(seed)
    out = soft_argmax_projection(torch.randn(1, d, 3, 3, generator=g, dtype=torch.float64) * scale)
    assert (out >= 0).all() and (out <= d - 1 + 1e-9).all()


def test_soft_argmax_rejects_nan():
    cost = torch.zeros(1, 4, 2, 2)
    cost[0, 1, 0, 0] = float("nan")
    with pytest.raises(NumericError):
        soft_argmax_projection(cost)


def test_soft_argmax_gradient_vs_finite_differences():
    g = torch.Generator().manual_seed(3)
    cost = torch.randn(1, 5, 2, 3, generator=g, dtype=torch.float64, requires_grad=True)
    weights = torch.randn(1, 2, 3, generator=g, dtype=torch.float64)

    def f(c):
        return (soft_argmax_projection(c) * weights).sum()

    (analytic,) = torch.autograd.grad(f(cost), cost)
    numeric = central_fd_gradient(f, cost)
    assert relative_error(analytic, numeric) < 1e-4


def test_upsample_matches_bilinear_oracle(rng):
    coarse = rng.random((3, 4))
    up = upsample_disparity(torch.from_numpy(coarse)[None], factor=3)[0].numpy()
    assert up.shape == (9, 12)
    for y, x in np.ndindex(9, 12):
        assert up[y, x] == pytest.approx(3 * bilinear_upsample_pixel(coarse, 9, 12, y, x), abs=1e-12)


def test_upsample_constant_scales_value():
    up = upsample_disparity(torch.full((1, 4, 4), 2.0), factor=3)
    torch.testing.assert_close(up, torch.full((1, 12, 12), 6.0))


def test_upsample_identity_for_factor_one():
    d = torch.rand(1, 3, 3)
    assert upsample_disparity(d, factor=1) is d
