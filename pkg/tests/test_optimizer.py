import numpy as np
import pytest
import torch

from monorecon.geometry import DepthMap, InvalidArgument
from monorecon.gradcheck import GradcheckConfig, random_instance, run_gradcheck
from monorecon.losses import LossWeights
from monorecon.optimizer import (
    GROUPS,
    PRESETS,
    NonFiniteLoss,
    OptimConfig,
    OptimizationDiverged,
    OptimState,
    ParamLayout,
    ParamVector,
    Problem,
    StageSchedule,
    compute_gradients,
    evaluate_loss,
    learning_rates,
    optimize,
    run_stage,
    update_step,
)
from monorecon.sampler import SamplerConfig


def plane_pair(H=12, W=16, seed=0):
    rng = np.random.default_rng(seed)
    img = rng.random((H, W, 3))
    depth = DepthMap(np.full((H, W), 2.0) + rng.uniform(0, 0.1, (H, W)))
    return np.stack([img, img]), [depth, DepthMap(depth.values.copy())]


# -- layout --------------------------------------------------------------------

def test_layout_counts():
    layout = ParamLayout(10, 25)
    assert layout.size == 10 * 27 + 6 * 9 + 1
    assert sum(layout.group_mask(g).sum() for g in GROUPS) == layout.size


def test_pack_unpack_round_trip(rng):
    pv = ParamVector(rng.random(4), rng.random(4), rng.random((4, 9)), rng.random((3, 3)), rng.random((3, 3)), 0.7)
    vec = pv.pack()
    back = ParamVector.unpack(vec, pv.layout())
    np.testing.assert_array_equal(back.pack(), vec)


def test_initial_values():
    pv = ParamVector.initial(3, 4)
    np.testing.assert_allclose(pv.alpha, 1.0)
    assert np.all(pv.beta == 0) and np.all(pv.omega == 1) and np.all(pv.r == 0) and pv.delta == 1.0


def test_presets_follow_documented_weights():
    assert PRESETS["indoor"]["local"][0][1] == LossWeights(2.0, 0.5, 0.01)
    sched = OptimConfig(preset="indoor").stages()
    assert [s.iterations for s in sched] == [2000, 4000]
    assert sched[1].weights_at(0) == LossWeights(2.0, 1.0, 0.1)
    assert sched[1].weights_at(1999) == LossWeights(2.0, 1.0, 0.1)
    assert sched[1].weights_at(2000) == LossWeights(2.0, 0.1, 0.1)
    out = OptimConfig(preset="outdoor").stages()
    assert out[0].weights_at(0).gc == 0.001 and out[1].weights_at(0).gc == 0.001
    assert [s.iterations for s in OptimConfig(schedule_scale=0.1).stages()] == [200, 400]
    with pytest.raises(InvalidArgument):
        OptimConfig(preset="space").stages()


# -- gradients -----------------------------------------------------------------

def test_gradcheck_passes():
    report = run_gradcheck(GradcheckConfig(instances=3))
    assert report.passed, report.lines()


def test_zero_weights_zero_gradient():
    problem, theta = random_instance(np.random.default_rng(0), GradcheckConfig())
    g, loss = compute_gradients(theta, [(0, 1)], problem, LossWeights(0, 0, 0))
    assert loss.total == 0.0 and np.all(g == 0)


def test_regularisation_gradient_is_negative_sign():
    problem, theta = random_instance(np.random.default_rng(1), GradcheckConfig())
    g, _ = compute_gradients(theta, [(0, 1)], problem, LossWeights(0, 0, 1.0))
    om = problem.layout.group_mask("omega")
    np.testing.assert_array_equal(g[om], -np.sign(1 - theta[om]))


def test_frozen_entries_are_exactly_zero():
    problem, theta = random_instance(np.random.default_rng(2), GradcheckConfig())
    frozen = problem.layout.group_mask("delta") | problem.layout.group_mask("r")
    g, _ = compute_gradients(theta, [(0, 1)], problem, LossWeights(2, 0.5, 0.01), frozen)
    assert np.all(g[frozen] == 0) and np.any(g[~frozen] != 0)


def test_nonfinite_loss_names_pair():
    images, depths = plane_pair()
    images[1, 5:, :] = np.nan
    problem = Problem(images, depths, 9)
    theta = ParamVector.initial(2, 9).pack()
    with pytest.raises(NonFiniteLoss) as err:
        compute_gradients(theta, [(1, 0), (0, 1)], problem, LossWeights(1, 1, 0))
    assert err.value.pair == (1, 0)


def test_zero_loss_fixed_point():
    images, depths = plane_pair()
    problem = Problem(images, depths, 9)
    loss = evaluate_loss(ParamVector.initial(2, 9).pack(), [(0, 1), (1, 0)], problem, LossWeights(1, 1, 1))
    assert (loss.pc, loss.gc, loss.regu, loss.total) == (0.0, 0.0, 0.0, 0.0)


# -- AdamW ---------------------------------------------------------------------

def test_adamw_matches_torch_reference(rng):
    x0 = rng.normal(size=5)
    lr = np.full(5, 1e-2)
    state = OptimState(lr, np.zeros(5, bool), (0.9, 0.999), 1e-8, 0.01)
    xt = torch.tensor(x0, requires_grad=True)
    opt = torch.optim.AdamW([xt], lr=1e-2, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01)
    x = x0.copy()
    for _ in range(20):
        g = rng.normal(size=5)
        x = update_step(x, g, state)
        opt.zero_grad()
        xt.grad = torch.tensor(g)
        opt.step()
    np.testing.assert_allclose(x, xt.detach().numpy(), rtol=1e-12, atol=1e-14)


def test_adamw_first_step_moves_by_lr():
    state = OptimState(np.array([1e-3]), np.array([False]))
    x = update_step(np.array([0.5]), np.array([1.0]), state)
    assert x[0] == pytest.approx(0.5 - 1e-3, rel=1e-6)


def test_adamw_zero_gradient_no_change():
    state = OptimState(np.full(3, 0.1), np.zeros(3, bool))
    x = np.array([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(update_step(x, np.zeros(3), state), x)


def test_adamw_frozen_never_moves():
    state = OptimState(np.full(2, 0.1), np.array([False, True]))
    x = np.array([1.0, 1.0])
    for _ in range(5):
        x = update_step(x, np.array([3.0, 3.0]), state)
    assert x[1] == 1.0 and x[0] < 1.0


def test_adamw_rejects_nonfinite():
    with pytest.raises(FloatingPointError):
        update_step(np.zeros(1), np.array([np.inf]), OptimState(np.ones(1), np.zeros(1, bool)))


# -- stages ----------------------------------------------------------------------

def test_zero_iterations_unchanged():
    images, depths = plane_pair()
    problem = Problem(images, depths, 9)
    params = ParamVector.initial(2, 9).pack()
    state = OptimState(learning_rates(problem.layout, OptimConfig()), np.zeros(len(params), bool))
    out = run_stage(StageSchedule("local", 0, [(0.0, LossWeights(1, 1, 1))]), params, problem, state,
                    SamplerConfig(), np.random.default_rng(0))
    np.testing.assert_array_equal(out, params)


def test_divergence_guard_aborts_after_three_rejections():
    images, depths = plane_pair()
    problem = Problem(images, depths, 9)
    params = ParamVector.initial(2, 9).pack()
    params[problem.layout.group_mask("beta")] = np.nan
    state = OptimState(learning_rates(problem.layout, OptimConfig()), np.zeros(len(params), bool))
    lr0 = state.lr.copy()
    with pytest.raises(OptimizationDiverged):
        run_stage(StageSchedule("local", 10, [(0.0, LossWeights(1, 1, 1))]), params, problem, state,
                  SamplerConfig(), np.random.default_rng(0))
    np.testing.assert_allclose(state.lr, lr0 / 4)


def test_affine_recovery_with_fixed_geometry():
    """GT poses and focal frozen, only (alpha, beta) free: recovers the closed-form fit."""
    from monorecon.synth import CorruptionSpec, SceneSpec, make_sequence

    spec = SceneSpec.default()
    spec.frames = 2
    spec.width, spec.height, spec.focal = 32, 24, 30.0
    seq = make_sequence(spec, CorruptionSpec(alphas=[1.0, 1.6], betas=[0.0, 0.4]))
    cfg = OptimConfig(local_iters=600, global_iters=0, freeze=("omega",))
    res = optimize(seq.images, seq.depths, cfg, SamplerConfig(refs_per_step=2),
                   fixed_poses=seq.poses, fixed_delta=spec.focal / (1.2 * 32), downsample=False)
    for i in range(2):
        m = seq.depths[i].mask
        X = np.stack([seq.depths[i].values[m], np.ones(m.sum())], 1)
        a_ls, b_ls = np.linalg.lstsq(X, seq.gt_depths[i].values[m], rcond=None)[0]
        assert res.params.alpha[i] == pytest.approx(a_ls, rel=0.02)
        assert res.params.beta[i] == pytest.approx(b_ls, abs=0.02 * np.median(seq.gt_depths[i].values[m]))
    assert res.trace[-1].total <= res.trace[0].total


def test_optimize_rejects_single_frame():
    images, depths = plane_pair()
    with pytest.raises(InvalidArgument):
        optimize(images[:1], depths[:1], OptimConfig(schedule_scale=0.0), downsample=False)


def test_optimize_identical_frames_stay_put():
    images, depths = plane_pair()
    res = optimize(images, depths, OptimConfig(schedule_scale=0.01, anchors=9), downsample=False)
    assert res.trace[0].total == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(res.depths[0].values, depths[0].values, rtol=1e-3)


def test_optimize_is_deterministic():
    images, depths = plane_pair(seed=4)
    depths[1] = DepthMap(depths[1].values * 1.3)
    a = optimize(images, depths, OptimConfig(schedule_scale=0.01, anchors=9), downsample=False)
    b = optimize(images, depths, OptimConfig(schedule_scale=0.01, anchors=9), downsample=False)
    np.testing.assert_array_equal(a.params.pack(), b.params.pack())
