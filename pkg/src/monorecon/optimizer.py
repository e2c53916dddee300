"""Parameter layout, loss evaluation with gradients, AdamW, and the two-stage loop.

Gradients come from torch's reverse-mode autograd run in float64 over the
same geometry/alignment/loss code the rest of the package uses; the update
rule is implemented here on flat numpy vectors so that freezing, per-group
learning rates and the divergence guard stay explicit.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import sampler as smp
from .alignment import LwlrConfig, LwlrGrid, align_depth_t, anchor_grid, inverse_softplus
from .geometry import (
    EPS_DEPTH,
    DepthMap,
    InvalidArgument,
    Stage,
    chain_poses,
    init_focal,
    intrinsics_matrix_t,
    pose_from_rt,
    sample_bilinear_batch,
    warp_points,
)
from .losses import LossBreakdown, LossWeights, geometric_terms, geometric_valid, photometric_terms

logger = logging.getLogger(__name__)

GROUPS = ("alpha", "beta", "omega", "r", "t", "delta")

PRESETS = {
    "indoor": {
        "local": [(0.0, LossWeights(2.0, 0.5, 0.01))],
        "global": [(0.0, LossWeights(2.0, 1.0, 0.1)), (0.5, LossWeights(2.0, 0.1, 0.1))],
    },
    "outdoor": {
        "local": [(0.0, LossWeights(2.0, 0.001, 0.01))],
        "global": [(0.0, LossWeights(2.0, 0.001, 0.1))],
    },
}


class NonFiniteLoss(FloatingPointError):
    def __init__(self, pair, message: str = "non-finite loss"):
        super().__init__(f"{message} on keyframe pair {pair}")
        self.pair = pair


class OptimizationDiverged(RuntimeError):
    pass


# -- parameter layout --------------------------------------------------------

@dataclass
class ParamLayout:
    """Flat vector layout ``[alpha_raw | beta | omega | r | t | delta]``.

    ``alpha_raw`` passes through softplus so the global scale stays positive.
    """

    frames: int
    anchors: int

    @property
    def sizes(self) -> dict:
        P, M = self.frames, self.anchors
        return {"alpha": P, "beta": P, "omega": P * M, "r": 3 * (P - 1), "t": 3 * (P - 1), "delta": 1}

    @property
    def slices(self) -> dict:
        out, start = {}, 0
        for name in GROUPS:
            n = self.sizes[name]
            out[name] = slice(start, start + n)
            start += n
        return out

    @property
    def size(self) -> int:
        return sum(self.sizes.values())

    def group_mask(self, name: str) -> np.ndarray:
        m = np.zeros(self.size, dtype=bool)
        m[self.slices[name]] = True
        return m


@dataclass
class ParamVector:
    alpha_raw: np.ndarray
    beta: np.ndarray
    omega: np.ndarray
    r: np.ndarray
    t: np.ndarray
    delta: float

    @classmethod
    def initial(cls, frames: int, anchors: int, delta: float = 1.0) -> "ParamVector":
        return cls(np.full(frames, inverse_softplus(1.0)), np.zeros(frames),
                   np.ones((frames, anchors)), np.zeros((frames - 1, 3)),
                   np.zeros((frames - 1, 3)), float(delta))

    @property
    def alpha(self) -> np.ndarray:
        return np.logaddexp(0.0, self.alpha_raw)

    def layout(self) -> ParamLayout:
        return ParamLayout(len(self.beta), self.omega.shape[1])

    def pack(self) -> np.ndarray:
        return np.concatenate([self.alpha_raw, self.beta, self.omega.ravel(), self.r.ravel(),
                               self.t.ravel(), [self.delta]]).astype(np.float64)

    @classmethod
    def unpack(cls, vec: np.ndarray, layout: ParamLayout) -> "ParamVector":
        s = layout.slices
        P, M = layout.frames, layout.anchors
        return cls(vec[s["alpha"]].copy(), vec[s["beta"]].copy(), vec[s["omega"]].reshape(P, M).copy(),
                   vec[s["r"]].reshape(P - 1, 3).copy(), vec[s["t"]].reshape(P - 1, 3).copy(),
                   float(vec[s["delta"]][0]))


# -- the differentiable problem ---------------------------------------------

class Problem:
    """Frames, affine-invariant depths and fixed run geometry.

    ``forward`` maps a flat parameter tensor and a list of keyframe pairs to
    the weighted loss; everything not depending on parameters is cached.
    """

    def __init__(self, images, depths: list[DepthMap], anchors: int = 25,
                 lwlr: LwlrConfig | None = None, masks=None, fixed_poses=None):
        if len(depths) < 2:
            raise InvalidArgument("need at least two frames")
        for d in depths:
            d.require(Stage.AFFINE_INVARIANT)
        self.images = torch.as_tensor(np.asarray(images, dtype=np.float64))
        if self.images.ndim == 3:
            self.images = self.images[..., None]
        self.P, self.H, self.W = self.images.shape[:3]
        self.layout = ParamLayout(self.P, anchors)
        self.f0 = init_focal(self.W, self.H)
        self.depth_affine = torch.as_tensor(np.stack([d.values for d in depths]))
        valid = np.stack([d.mask for d in depths])
        if masks is not None:
            valid &= np.asarray(masks, dtype=bool)
        self.valid = torch.as_tensor(valid)
        self.lwlr = lwlr or LwlrConfig()
        self.anchor_u, self.anchor_v = anchor_grid(self.H, self.W, anchors)
        self.grid = LwlrGrid(self.H, self.W, self.anchor_u, self.anchor_v, self.lwlr)
        v, u = np.mgrid[0:self.H, 0:self.W].astype(np.float64)
        self.u = torch.as_tensor(u.ravel())
        self.v = torch.as_tensor(v.ravel())
        self.fixed_poses = None if fixed_poses is None else torch.as_tensor(np.asarray(fixed_poses, float))

    def split(self, theta: torch.Tensor) -> dict:
        s = self.layout.slices
        P, M = self.P, self.layout.anchors
        return {
            "alpha": torch.nn.functional.softplus(theta[s["alpha"]]),
            "beta": theta[s["beta"]],
            "omega": theta[s["omega"]].reshape(P, M),
            "r": theta[s["r"]].reshape(P - 1, 3),
            "t": theta[s["t"]].reshape(P - 1, 3),
            "delta": theta[s["delta"]][0],
        }

    def poses(self, parts: dict) -> torch.Tensor:
        if self.fixed_poses is not None:
            return self.fixed_poses
        return chain_poses(pose_from_rt(parts["r"], parts["t"]))

    def depths(self, parts: dict, frames=None) -> torch.Tensor:
        frames = np.arange(self.P) if frames is None else np.asarray(frames)
        return align_depth_t(self.depth_affine[frames], parts["alpha"][frames], parts["beta"][frames],
                             parts["omega"][frames], self.grid, self.anchor_u, self.anchor_v,
                             self.valid[frames])

    def pair_terms(self, theta: torch.Tensor, pairs):
        """Per-pair photometric and geometric means plus no-overlap flags."""
        parts = self.split(theta)
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        frames, inv = np.unique(pairs, return_inverse=True)
        inv = inv.reshape(-1, 2)
        D = self.depths(parts, frames)
        Dvalid = self.valid[frames] & (D.detach() > EPS_DEPTH)
        poses = self.poses(parts)
        K = intrinsics_matrix_t(parts["delta"], self.f0, self.W, self.H)
        li, lj = inv[:, 0], inv[:, 1]
        gi, gj = pairs[:, 0], pairs[:, 1]
        B, N = len(pairs), self.H * self.W
        d_src = D[li].reshape(B, N)
        uj, vj, dj, ok = warp_points(self.u, self.v, d_src, K, poses[gi], poses[gj], self.W, self.H)
        ok = ok & Dvalid[li].reshape(B, N)
        # depth and colour share one sampling pass
        stacked = torch.cat([D[lj].unsqueeze(-1), self.images[gj]], -1)
        tgt, ok_t = sample_bilinear_batch(stacked, uj, vj, Dvalid[lj], zero_invalid=False)
        d_tgt, c_tgt = tgt[..., 0], tgt[..., 1:]
        ok = geometric_valid(d_tgt, dj, ok & ok_t)
        c_src = self.images[gi].reshape(B, N, -1)
        pc, empty = photometric_terms(c_src, c_tgt, ok)
        gc, _ = geometric_terms(d_tgt, dj, ok)
        return pc, gc, empty, parts

    def forward(self, theta: torch.Tensor, pairs, weights: LossWeights):
        pc, gc, empty, parts = self.pair_terms(theta, pairs)
        bad = ~(torch.isfinite(pc) & torch.isfinite(gc))
        if bool(bad.any()):
            k = int(torch.nonzero(bad)[0])
            raise NonFiniteLoss(tuple(int(x) for x in np.asarray(pairs)[k]))
        L_pc = pc.mean()
        L_gc = gc.mean()
        L_regu = (1.0 - parts["omega"]).abs().sum()
        total = weights.pc * L_pc + weights.gc * L_gc + weights.regu * L_regu
        if not bool(torch.isfinite(total)):
            raise NonFiniteLoss(None, "non-finite total loss")
        return total, (L_pc, L_gc, L_regu), empty


def compute_gradients(params: np.ndarray, pairs, problem: Problem, weights: LossWeights,
                      frozen: np.ndarray | None = None):
    """Loss breakdown and ``dL/dtheta`` for the flat vector ``params``.

    Frozen entries of the gradient are exactly zero.
    """
    theta = torch.tensor(params, dtype=torch.float64, requires_grad=True)
    total, (pc, gc, regu), _ = problem.forward(theta, pairs, weights)
    total.backward()
    grad = theta.grad.numpy().copy()
    if not np.all(np.isfinite(grad)):
        raise NonFiniteLoss(None, "non-finite gradient")
    if frozen is not None:
        grad[frozen] = 0.0
    breakdown = LossBreakdown(float(pc.detach()), float(gc.detach()), float(regu.detach()),
                              float(total.detach()))
    return grad, breakdown


def evaluate_loss(params: np.ndarray, pairs, problem: Problem, weights: LossWeights) -> LossBreakdown:
    with torch.no_grad():
        total, (pc, gc, regu), _ = problem.forward(torch.as_tensor(params), pairs, weights)
    return LossBreakdown(float(pc), float(gc), float(regu), float(total))


# -- AdamW --------------------------------------------------------------------

@dataclass
class OptimState:
    lr: np.ndarray
    frozen: np.ndarray
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.lr)
        self.m = np.zeros(n) if self.m is None else self.m
        self.v = np.zeros(n) if self.v is None else self.v

    def snapshot(self) -> tuple:
        return self.step, self.m.copy(), self.v.copy()

    def restore(self, snap: tuple) -> None:
        self.step, self.m, self.v = snap[0], snap[1].copy(), snap[2].copy()


def update_step(params: np.ndarray, grads: np.ndarray, state: OptimState) -> np.ndarray:
    """One bias-corrected AdamW step with decoupled weight decay."""
    if not np.all(np.isfinite(grads)):
        raise FloatingPointError("non-finite gradient")
    b1, b2 = state.betas
    g = np.where(state.frozen, 0.0, grads)
    state.step += 1
    state.m = b1 * state.m + (1 - b1) * g
    state.v = b2 * state.v + (1 - b2) * g * g
    m_hat = state.m / (1 - b1 ** state.step)
    v_hat = state.v / (1 - b2 ** state.step)
    new = params * (1 - state.lr * state.weight_decay) - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return np.where(state.frozen, params, new)


# -- schedules and the main loop ----------------------------------------------

@dataclass
class StageSchedule:
    stage: str  # "local" | "global"
    iterations: int
    weights: list = field(default_factory=list)  # (start fraction, LossWeights)

    def weights_at(self, it: int) -> LossWeights:
        current = self.weights[0][1]
        for start, w in self.weights:
            if it >= start * self.iterations:
                current = w
        return current


@dataclass
class OptimConfig:
    preset: str = "indoor"
    schedule_scale: float = 1.0
    local_iters: int = 2000
    global_iters: int = 4000
    anchors: int = 25
    lr_pose: float = 1e-3
    lr_focal: float = 1e-3
    lr_depth: float = 1e-2
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    max_rejections: int = 3
    freeze: tuple = ()  # extra parameter groups to hold at their initial values

    def stages(self) -> list[StageSchedule]:
        if self.preset not in PRESETS:
            raise InvalidArgument(f"unknown preset {self.preset!r}")
        p = PRESETS[self.preset]
        return [
            StageSchedule("local", int(round(self.local_iters * self.schedule_scale)), p["local"]),
            StageSchedule("global", int(round(self.global_iters * self.schedule_scale)), p["global"]),
        ]


@dataclass
class TraceRow:
    iteration: int
    stage: str
    pc: float
    gc: float
    regu: float
    total: float


def learning_rates(layout: ParamLayout, cfg: OptimConfig) -> np.ndarray:
    lr = np.empty(layout.size)
    for name, sl in layout.slices.items():
        lr[sl] = {"alpha": cfg.lr_depth, "beta": cfg.lr_depth, "omega": cfg.lr_depth,
                  "r": cfg.lr_pose, "t": cfg.lr_pose, "delta": cfg.lr_focal}[name]
    return lr


def current_poses(params: np.ndarray, problem: Problem) -> np.ndarray:
    if problem.fixed_poses is not None:
        return problem.fixed_poses.numpy()
    pv = ParamVector.unpack(params, problem.layout)
    return chain_poses(pose_from_rt(pv.r, pv.t))


def run_stage(stage: StageSchedule, params: np.ndarray, problem: Problem, state: OptimState,
              sampler_cfg: smp.SamplerConfig, rng: np.random.Generator,
              trace: list | None = None, start_iteration: int = 0,
              max_rejections: int = 3) -> np.ndarray:
    """Run one stage; appends a :class:`TraceRow` per accepted iteration."""
    params = params.copy()
    schedule = None
    rejections = 0
    last_good = None
    for it in range(stage.iterations):
        if stage.stage == "local":
            if schedule is None:
                schedule = smp.local_probabilities(problem.P, sampler_cfg.k)
        elif schedule is None or it % sampler_cfg.refresh_every == 0:
            schedule = smp.global_probabilities(current_poses(params, problem), sampler_cfg)
        pairs = smp.sample_pairs(schedule, sampler_cfg.refs_per_step, rng)
        weights = stage.weights_at(it)
        try:
            grads, loss = compute_gradients(params, pairs, problem, weights, state.frozen)
        except NonFiniteLoss as err:
            rejections += 1
            if rejections >= max_rejections:
                raise OptimizationDiverged(f"{rejections} consecutive rejected steps: {err}") from err
            logger.warning("rejecting step at iteration %d (%s); halving learning rates", it, err)
            if last_good is not None:
                params, snap = last_good
                state.restore(snap)
            state.lr = state.lr / 2
            continue
        rejections = 0
        last_good = (params.copy(), state.snapshot())
        params = update_step(params, grads, state)
        if trace is not None:
            trace.append(TraceRow(start_iteration + it, stage.stage, loss.pc, loss.gc, loss.regu, loss.total))
    return params


@dataclass
class OptimizeResult:
    params: ParamVector
    depths: list
    poses: np.ndarray
    K: np.ndarray
    delta: float
    f0: float
    trace: list
    selected: list


def final_depths(params: np.ndarray, problem: Problem) -> list[DepthMap]:
    with torch.no_grad():
        parts = problem.split(torch.as_tensor(params))
        D = problem.depths(parts).numpy()
    out = []
    for i in range(problem.P):
        ok = problem.valid[i].numpy() & (D[i] > EPS_DEPTH)
        out.append(DepthMap(np.where(ok, D[i], 0.0), Stage.SCALE_CONSISTENT, ok))
    return out


def optimize(images, depths: list[DepthMap], cfg: OptimConfig | None = None,
             sampler_cfg: smp.SamplerConfig | None = None, lwlr: LwlrConfig | None = None,
             masks=None, fixed_poses=None, fixed_delta: float | None = None,
             downsample: bool = True, callback=None) -> OptimizeResult:
    """Downsample, initialise, run the local and global stages, and rectify.

    ``fixed_poses`` (camera-to-world, one per input frame) freezes the pose
    parameters; ``fixed_delta`` freezes the focal scalar.
    """
    cfg = cfg or OptimConfig()
    sampler_cfg = sampler_cfg or smp.SamplerConfig()
    images = np.asarray(images, dtype=np.float64)
    selected = smp.downsample_frames(images, sampler_cfg) if downsample else list(range(len(images)))
    if len(selected) < 2:
        raise InvalidArgument(f"need at least 2 frames after downsampling, got {len(selected)}")
    sel_masks = None if masks is None else np.asarray(masks)[selected]
    sel_poses = None if fixed_poses is None else np.asarray(fixed_poses)[selected]
    problem = Problem(images[selected], [depths[i] for i in selected], cfg.anchors, lwlr,
                      sel_masks, sel_poses)
    layout = problem.layout
    pv = ParamVector.initial(problem.P, cfg.anchors, 1.0 if fixed_delta is None else fixed_delta)
    params = pv.pack()
    frozen = np.zeros(layout.size, dtype=bool)
    if fixed_poses is not None:
        frozen |= layout.group_mask("r") | layout.group_mask("t")
    if fixed_delta is not None:
        frozen |= layout.group_mask("delta")
    for name in cfg.freeze:
        if name not in GROUPS:
            raise InvalidArgument(f"unknown parameter group {name!r}")
        frozen |= layout.group_mask(name)
    state = OptimState(learning_rates(layout, cfg), frozen, tuple(cfg.betas), cfg.eps, cfg.weight_decay)
    rng = np.random.default_rng(sampler_cfg.seed)
    trace: list[TraceRow] = []
    start = 0
    for stage in cfg.stages():
        logger.info("%s stage: %d iterations over %d frames", stage.stage, stage.iterations, problem.P)
        params = run_stage(stage, params, problem, state, sampler_cfg, rng, trace, start,
                           cfg.max_rejections)
        start += stage.iterations
        if callback is not None:
            callback(stage.stage, params, problem)
    pv = ParamVector.unpack(params, layout)
    poses = current_poses(params, problem)
    K = intrinsics_matrix_t(torch.tensor(pv.delta, dtype=torch.float64), problem.f0, problem.W, problem.H).numpy()
    return OptimizeResult(pv, final_depths(params, problem), poses, K, pv.delta, problem.f0,
                          trace, selected)


def fov_from_focal(width: int, focal: float) -> float:
    return 2.0 * math.atan(width / (2.0 * focal))
