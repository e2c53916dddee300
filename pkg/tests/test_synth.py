import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from monorecon.alignment import GlobalAffine, global_align
from monorecon.geometry import DepthMap, InvalidArgument, Stage, make_relative_pose
from monorecon.synth import (
    CorruptionSpec,
    Primitive,
    SceneError,
    SceneSpec,
    Texture,
    cast,
    corrupt_depth,
    make_sequence,
    render_scene,
    trajectory_poses,
)


def wall_scene(z=2.0, width=16, height=12, focal=20.0):
    wall = Primitive("plane", {"point": [0.0, 0.0, z], "normal": [0.0, 0.0, -1.0]}, Texture("noise", 0.3, 1))
    return SceneSpec(width=width, height=height, focal=focal, frames=1, supersample=2, primitives=[wall])


@pytest.mark.parametrize("focal", [10.0, 20.0, 55.0])
def test_fronto_parallel_plane_constant_depth(focal):
    spec = wall_scene(focal=focal)
    img, depth = render_scene(spec, 0, np.eye(4)[None])
    np.testing.assert_allclose(depth.values, 2.0, rtol=0, atol=1e-12)
    assert depth.mask.all() and depth.stage == Stage.SCALE_CONSISTENT
    assert img.std() > 0.01  # textured, so photometric terms are informative


def test_translated_camera_plane_depth():
    pose = make_relative_pose(([0, 0, 0], [0, 0, 0.5]))
    _, depth = render_scene(wall_scene(), 0, pose[None])
    np.testing.assert_allclose(depth.values, 1.5, atol=1e-12)


def test_sphere_centre_pixel_depth():
    ball = Primitive("sphere", {"center": [0.0, 0.0, 4.0], "radius": 1.0})
    spec = SceneSpec(width=16, height=12, focal=20.0, frames=1, supersample=1, primitives=[ball])
    z, _, hit = cast(spec, np.eye(4), np.array([8.0]), np.array([6.0]))
    assert hit[0] and z[0] == pytest.approx(3.0, abs=1e-12)


def test_depth_is_analytic_on_sphere(rng):
    ball = Primitive("sphere", {"center": [0.2, -0.1, 5.0], "radius": 1.5})
    spec = SceneSpec(width=16, height=12, focal=20.0, frames=1, supersample=1, primitives=[ball])
    u, v = rng.uniform(4, 12, 50), rng.uniform(3, 9, 50)
    z, _, hit = cast(spec, np.eye(4), u, v)
    ray = np.stack([(u - 8) / 20, (v - 6) / 20, np.ones(50)], 1)
    pts = ray * z[:, None]
    dist = np.linalg.norm(pts - [0.2, -0.1, 5.0], axis=1)
    np.testing.assert_allclose(dist[hit], 1.5, atol=1e-9)


def test_camera_inside_primitive_raises():
    ball = Primitive("sphere", {"center": [0.0, 0.0, 0.0], "radius": 1.0})
    spec = SceneSpec(width=8, height=6, primitives=[ball])
    with pytest.raises(SceneError):
        render_scene(spec, 0, np.eye(4)[None])


def test_default_trajectory_is_gentle():
    poses = trajectory_poses(SceneSpec.default())
    assert len(poses) == 20
    for a, b in zip(poses, poses[1:]):
        R = a[:3, :3].T @ b[:3, :3]
        angle = np.degrees(np.arccos(np.clip((np.trace(R) - 1) / 2, -1, 1)))
        assert angle <= 5.0


def test_pure_rotation_segment_keeps_position():
    spec = SceneSpec.default()
    spec.trajectory.pure_rotation_frames = 3
    poses = trajectory_poses(spec)
    assert len(poses) == 23
    np.testing.assert_allclose(poses[-1][:3, 3], poses[19][:3, 3])


def test_scene_spec_json_round_trip():
    spec = SceneSpec.default()
    back = SceneSpec.from_dict(json.loads(spec.to_json()))
    assert back.to_json() == spec.to_json()


# -- corruption --------------------------------------------------------------------

def test_identity_corruption():
    gt = DepthMap(np.full((4, 5), 2.0), Stage.SCALE_CONSISTENT)
    out = corrupt_depth(gt, 1.0, 0.0)
    np.testing.assert_array_equal(out.values, gt.values)
    assert out.stage == Stage.AFFINE_INVARIANT


@given(st.floats(0.5, 2.0), st.floats(-0.2, 0.2))
@settings(max_examples=30)
def test_inverse_affine_recovers_gt(alpha, beta_frac):
    gt = DepthMap(np.linspace(1, 4, 20).reshape(4, 5), Stage.SCALE_CONSISTENT)
    beta = beta_frac * 2.5
    out = corrupt_depth(gt, alpha, beta)
    back = global_align(out, GlobalAffine(1 / alpha, -beta / alpha))
    np.testing.assert_allclose(back.values, gt.values, rtol=1e-12)


def test_corruption_recoverable_by_least_squares():
    spec = SceneSpec.default()
    spec.frames, spec.supersample = 4, 1
    seq = make_sequence(spec, CorruptionSpec(seed=3))
    assert np.all((seq.alphas >= 0.5) & (seq.alphas <= 2.0))
    for gt, d, a, b in zip(seq.gt_depths, seq.depths, seq.alphas, seq.betas):
        m = gt.mask
        assert abs(b) <= 0.2 * np.median(gt.values[m]) + 1e-12
        X = np.stack([gt.values[m], np.ones(m.sum())], 1)
        a_ls, b_ls = np.linalg.lstsq(X, d.values[m], rcond=None)[0]
        assert a_ls == pytest.approx(a, abs=1e-9) and b_ls == pytest.approx(b, abs=1e-9)


def test_non_positive_corruption_rejected():
    gt = DepthMap(np.full((2, 2), 1.0), Stage.SCALE_CONSISTENT)
    with pytest.raises(InvalidArgument):
        corrupt_depth(gt, 0.5, -1.0)
    with pytest.raises(InvalidArgument):
        CorruptionSpec(alphas=[0.0]).draw([1.0])


def test_smooth_field_is_unit_when_disabled():
    np.testing.assert_array_equal(CorruptionSpec().smooth_field(4, 5, 0), 1.0)
    field = CorruptionSpec(field_amplitude=0.1).smooth_field(4, 5, 0)
    assert np.all(np.abs(field - 1) <= 0.1 + 1e-12) and field.std() > 0


def test_sequence_is_reproducible():
    spec = SceneSpec.default()
    spec.frames, spec.supersample, spec.width, spec.height = 3, 1, 16, 12
    spec.focal = 15.0
    a = make_sequence(spec, CorruptionSpec(seed=5))
    b = make_sequence(spec, CorruptionSpec(seed=5))
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.depths[2].values, b.depths[2].values)
