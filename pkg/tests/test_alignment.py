import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from monorecon.alignment import (
    AnchorSet,
    DegenerateInput,
    GlobalAffine,
    LwlrConfig,
    LwlrGrid,
    align_depth_t,
    anchor_grid,
    consistency_align,
    global_align,
    inverse_softplus,
    lwlr_solve,
    sample_anchors,
    softplus,
)
from monorecon.geometry import DepthMap, InvalidArgument, Stage


def brute_lwlr(depth, au, av, targets, b, lam):
    """Per-pixel weighted ridge fit ``y ~ s d + theta`` with the penalty on theta."""
    H, W = depth.shape
    d = depth[av, au]
    X = np.stack([d, np.ones_like(d)], 1)
    A = np.zeros((H, W))
    B = np.zeros((H, W))
    for v in range(H):
        for u in range(W):
            dist2 = (u - au) ** 2 + (v - av) ** 2
            w = np.exp(-dist2 / (2 * b * b)) / math.sqrt(2 * math.pi)
            Wm = np.diag(w)
            M = X.T @ Wm @ X + np.diag([0.0, lam])
            rhs = X.T @ Wm @ targets
            det = M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0]
            inv = np.array([[M[1, 1], -M[0, 1]], [-M[1, 0], M[0, 0]]]) / det
            A[v, u], B[v, u] = inv @ rhs
    return A, B


@pytest.mark.parametrize("seed", range(5))
def test_lwlr_stride1_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    H, W, M = 12, 16, 9
    depth = DepthMap(rng.uniform(1, 5, (H, W)), Stage.GLOBALLY_ALIGNED)
    anchors = sample_anchors(depth, M, rng.uniform(0.5, 1.5, M))
    targets = anchors.omega * anchors.depths
    cfg = LwlrConfig(bandwidth=rng.uniform(2, 8), ridge=rng.uniform(0, 0.5), stride=1)
    maps = lwlr_solve(depth, anchors, targets, cfg)
    A, B = brute_lwlr(depth.values, anchors.u, anchors.v, targets, cfg.bandwidth, cfg.ridge)
    assert np.abs(maps.scale - A).max() < 1e-8
    assert np.abs(maps.shift - B).max() < 1e-8


def test_lwlr_identity_targets():
    rng = np.random.default_rng(0)
    depth = DepthMap(rng.uniform(1, 5, (12, 16)), Stage.GLOBALLY_ALIGNED)
    anchors = sample_anchors(depth, 9)
    maps = lwlr_solve(depth, anchors, anchors.depths, LwlrConfig())
    np.testing.assert_allclose(maps.scale, 1.0, atol=1e-9)
    np.testing.assert_allclose(maps.shift, 0.0, atol=1e-9)


def test_lwlr_huge_bandwidth_is_global_least_squares():
    rng = np.random.default_rng(3)
    depth = DepthMap(rng.uniform(1, 5, (12, 16)), Stage.GLOBALLY_ALIGNED)
    anchors = sample_anchors(depth, 9)
    y = rng.uniform(1, 5, 9)
    maps = lwlr_solve(depth, anchors, y, LwlrConfig(bandwidth=1e6 * 16, ridge=0.0, stride=1))
    X = np.stack([anchors.depths, np.ones(9)], 1)
    s, th = np.linalg.lstsq(X, y, rcond=None)[0]
    np.testing.assert_allclose(maps.scale, s, atol=1e-7)
    np.testing.assert_allclose(maps.shift, th, atol=1e-7)


def test_lwlr_two_anchors_interpolate_exactly():
    depth = np.full((12, 16), 2.0)
    depth[3, 4] = 1.0
    depth[8, 12] = 3.0
    dm = DepthMap(depth, Stage.GLOBALLY_ALIGNED)
    anchors = AnchorSet(np.array([4, 12]), np.array([3, 8]), np.ones(2), np.array([1.0, 3.0]),
                        np.array([True, True]))
    y = np.array([0.7, 4.2])
    maps = lwlr_solve(dm, anchors, y, LwlrConfig(bandwidth=3.0, ridge=0.0, stride=1))
    fitted = maps.scale * depth + maps.shift
    assert fitted[3, 4] == pytest.approx(0.7, abs=1e-7)
    assert fitted[8, 12] == pytest.approx(4.2, abs=1e-7)


def test_lwlr_singular_falls_back_to_ratio():
    dm = DepthMap(np.full((12, 16), 3.0), Stage.GLOBALLY_ALIGNED)
    anchors = sample_anchors(dm, 9)
    maps = lwlr_solve(dm, anchors, 2 * anchors.depths, LwlrConfig(ridge=0.0, stride=1))
    assert maps.singular
    np.testing.assert_allclose(maps.scale * dm.values + maps.shift, 6.0)


def test_lwlr_rejects_single_valid_anchor():
    d = np.zeros((12, 16))
    u, v = anchor_grid(12, 16, 9)
    d[v[0], u[0]] = 1.0
    dm = DepthMap(d, Stage.GLOBALLY_ALIGNED)
    with pytest.raises(DegenerateInput):
        lwlr_solve(dm, sample_anchors(dm, 9), np.ones(9), LwlrConfig())


def test_strided_upsampling_is_exact_on_coarse_grid():
    rng = np.random.default_rng(5)
    depth = DepthMap(rng.uniform(1, 5, (12, 16)), Stage.GLOBALLY_ALIGNED)
    anchors = sample_anchors(depth, 9, rng.uniform(0.5, 1.5, 9))
    y = anchors.omega * anchors.depths
    fine = lwlr_solve(depth, anchors, y, LwlrConfig(bandwidth=4.0, stride=1))
    coarse = lwlr_solve(depth, anchors, y, LwlrConfig(bandwidth=4.0, stride=4))
    for v in (0, 4, 8, 11):
        for u in (0, 4, 8, 12, 15):
            assert coarse.scale[v, u] == pytest.approx(fine.scale[v, u], abs=1e-12)


def test_lwlr_config_validation():
    for kw in ({"bandwidth": 0.0}, {"ridge": -1.0}, {"stride": 0}):
        with pytest.raises(InvalidArgument):
            LwlrConfig(**kw)


# -- global alignment and anchors ------------------------------------------------

def test_global_align_examples():
    d = DepthMap(np.array([[0.5, 1.0]]))
    out = global_align(d, GlobalAffine(2.0, 1.0))
    assert out.stage == Stage.GLOBALLY_ALIGNED
    np.testing.assert_allclose(out.values, [[2.0, 3.0]])
    np.testing.assert_array_equal(global_align(DepthMap(np.full((2, 2), 5.0)), GlobalAffine(1, -10)).mask, False)


def test_global_align_wrong_stage():
    with pytest.raises(InvalidArgument):
        global_align(DepthMap(np.ones((2, 2)), Stage.SCALE_CONSISTENT), GlobalAffine())


def test_anchor_grid_layout():
    u, v = anchor_grid(100, 100, 25)
    assert sorted(set(u)) == [10, 30, 50, 70, 90]
    assert sorted(set(v)) == [10, 30, 50, 70, 90]
    u1, v1 = anchor_grid(48, 64, 1)
    assert (u1[0], v1[0]) == (32, 24)
    with pytest.raises(InvalidArgument):
        anchor_grid(48, 64, 10)


def test_sample_anchors_constant_map():
    anchors = sample_anchors(DepthMap(np.full((20, 20), 2.5)), 9)
    np.testing.assert_allclose(anchors.depths, 2.5)


def test_sample_anchors_all_invalid():
    with pytest.raises(DegenerateInput):
        sample_anchors(DepthMap(np.zeros((20, 20))), 9)


@given(st.floats(0.01, 20.0))
def test_softplus_inverse(y):
    assert softplus(inverse_softplus(y)) == pytest.approx(y, rel=1e-9)


# -- full alignment --------------------------------------------------------------

def test_consistency_align_identity():
    rng = np.random.default_rng(2)
    d = DepthMap(rng.uniform(1, 5, (24, 32)))
    out = consistency_align(d, GlobalAffine(), sample_anchors(d, 25), LwlrConfig())
    assert out.stage == Stage.SCALE_CONSISTENT
    np.testing.assert_allclose(out.values, d.values, atol=1e-9)


def test_consistency_align_double_constant():
    d = DepthMap(np.full((12, 16), 1.7))
    anchors = sample_anchors(d, 9, np.full(9, 2.0))
    out = consistency_align(d, GlobalAffine(), anchors, LwlrConfig(ridge=0.0))
    np.testing.assert_allclose(out.values, 3.4, atol=1e-12)


def test_consistency_align_is_composition():
    rng = np.random.default_rng(4)
    d = DepthMap(rng.uniform(1, 5, (12, 16)))
    g = GlobalAffine(1.3, 0.2)
    omega = rng.uniform(0.8, 1.2, 9)
    out = consistency_align(d, g, sample_anchors(d, 9, omega), LwlrConfig())
    dg = global_align(d, g)
    anchors = sample_anchors(dg, 9, omega)
    maps = lwlr_solve(dg, anchors, omega * anchors.depths, LwlrConfig())
    np.testing.assert_allclose(out.values, maps.scale * dg.values + maps.shift, atol=1e-12)


def test_align_depth_t_matches_numpy_path():
    rng = np.random.default_rng(6)
    d = DepthMap(rng.uniform(1, 5, (12, 16)))
    omega = rng.uniform(0.8, 1.2, 9)
    ref = consistency_align(d, GlobalAffine(1.5, -0.3), sample_anchors(d, 9, omega), LwlrConfig())
    u, v = anchor_grid(12, 16, 9)
    grid = LwlrGrid(12, 16, u, v, LwlrConfig())
    out = align_depth_t(torch.as_tensor(d.values)[None], torch.tensor([1.5], dtype=torch.float64),
                        torch.tensor([-0.3], dtype=torch.float64), torch.as_tensor(omega)[None], grid, u, v)
    np.testing.assert_allclose(out[0].numpy(), ref.values, atol=1e-12)


def test_alignment_gradients_match_finite_differences():
    rng = np.random.default_rng(8)
    d = torch.as_tensor(rng.uniform(1, 5, (1, 12, 16)))
    u, v = anchor_grid(12, 16, 9)
    grid = LwlrGrid(12, 16, u, v, LwlrConfig())

    def f(x):
        return align_depth_t(d, x[:1], x[1:2], x[2:].reshape(1, 9), grid, u, v)[0, 5, 7]

    x = torch.as_tensor(np.concatenate([[1.2, 0.1], rng.uniform(0.8, 1.2, 9)])).requires_grad_()
    assert torch.autograd.gradcheck(f, (x,), eps=1e-6, atol=1e-7, rtol=1e-4)
