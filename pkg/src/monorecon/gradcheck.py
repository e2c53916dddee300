"""Central finite-difference check of the optimiser's analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .alignment import inverse_softplus
from .geometry import DepthMap, Stage, intrinsics_matrix_t, sample_bilinear_batch, warp_points
from .losses import LossWeights
from .optimizer import GROUPS, Problem, compute_gradients, evaluate_loss


@dataclass
class GradcheckConfig:
    instances: int = 10
    width: int = 8
    height: int = 6
    anchors: int = 4
    step: float = 1e-5
    tolerance: float = 1e-4
    floor: float = 1e-7
    margin: float = 1e-3
    seed: int = 0


@dataclass
class GradcheckReport:
    max_rel_error: dict = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.max_rel_error.values())

    def lines(self) -> list[str]:
        out = [f"{g:6s} max_rel_error={e:.3e} {'ok' if e < self.tolerance else 'FAIL'}"
               for g, e in self.max_rel_error.items()]
        out.append("PASS" if self.passed else "FAIL")
        return out


def random_instance(rng: np.random.Generator, cfg: GradcheckConfig):
    """Two textured frames with a small relative motion and non-trivial parameters."""
    H, W = cfg.height, cfg.width
    v, u = np.mgrid[0:H, 0:W] / max(H, W)
    images = []
    for _ in range(2):
        a = rng.uniform(2, 6, size=(3, 3))
        ph = rng.uniform(0, 2 * np.pi, size=(3,))
        images.append(np.stack([0.5 + 0.4 * np.sin(a[c, 0] * u + a[c, 1] * v + ph[c])
                                for c in range(3)], -1))
    depth_base = 2.0 + rng.uniform(-0.3, 0.3) * u + rng.uniform(-0.3, 0.3) * v
    depths = [DepthMap(depth_base * rng.uniform(0.8, 1.2) + rng.uniform(-0.1, 0.1),
                       Stage.AFFINE_INVARIANT) for _ in range(2)]
    problem = Problem(np.stack(images), depths, cfg.anchors)
    layout = problem.layout
    s = layout.slices
    theta = np.zeros(layout.size)
    theta[s["alpha"]] = inverse_softplus(1.0) + rng.uniform(-0.2, 0.2, 2)
    theta[s["beta"]] = rng.uniform(-0.1, 0.1, 2)
    # stay away from the |1 - omega| kink
    theta[s["omega"]] = 1.0 + rng.choice([-1, 1], layout.sizes["omega"]) * rng.uniform(0.05, 0.2, layout.sizes["omega"])
    theta[s["r"]] = rng.uniform(-0.08, 0.08, 3)
    theta[s["t"]] = rng.uniform(-0.15, 0.15, 3)
    theta[s["delta"]] = rng.uniform(0.9, 1.1)
    return problem, theta


def _kink_margin(problem: Problem, theta: np.ndarray, pairs) -> float:
    """Smallest distance of any evaluated quantity to a point where the loss is not smooth.

    The loss has kinks where a warped coordinate crosses a pixel centre (the
    bilinear stencil changes) and where an L1 argument crosses zero, and
    jumps where a point enters or leaves the image. Finite differences are
    only meaningful away from these, so instances too close to one are redrawn.
    """
    with torch.no_grad():
        parts = problem.split(torch.as_tensor(theta))
        D = problem.depths(parts)
        P = problem.poses(parts)
        K = intrinsics_matrix_t(parts["delta"], problem.f0, problem.W, problem.H)
        margins = []
        for i, j in pairs:
            uj, vj, dj, ok = warp_points(problem.u, problem.v, D[i].reshape(-1), K, P[i], P[j],
                                         problem.W, problem.H)
            for c, n in ((uj, problem.W), (vj, problem.H)):
                margins.append((c - torch.round(c)).abs().min())
                margins.append(torch.minimum(c.abs(), (c - (n - 1)).abs()).min())
            stacked = torch.cat([D[j].unsqueeze(-1), problem.images[j]], -1)[None]
            tgt, okt = sample_bilinear_batch(stacked, uj[None], vj[None])
            sel = (ok & okt[0])
            if sel.any():
                src = torch.cat([dj.unsqueeze(-1), problem.images[i].reshape(-1, problem.images.shape[-1])], -1)
                margins.append((src[sel] - tgt[0][sel]).abs().min())
    return float(min(margins))


def run_gradcheck(cfg: GradcheckConfig | None = None, grad_fn=compute_gradients) -> GradcheckReport:
    """Compare ``grad_fn`` to central differences for every parameter group.

    The per-group error is ``max|g - g_fd| / max(max|g_fd|, floor)``.
    """
    cfg = cfg or GradcheckConfig()
    rng = np.random.default_rng(cfg.seed)
    weights = LossWeights(2.0, 0.5, 0.01)
    pairs = [(0, 1), (1, 0)]
    worst = {g: 0.0 for g in GROUPS}
    for _ in range(cfg.instances):
        problem, theta = random_instance(rng, cfg)
        while _kink_margin(problem, theta, pairs) < cfg.margin:
            problem, theta = random_instance(rng, cfg)
        grad, _ = grad_fn(theta, pairs, problem, weights)
        fd = np.zeros_like(theta)
        for k in range(len(theta)):
            tp, tm = theta.copy(), theta.copy()
            tp[k] += cfg.step
            tm[k] -= cfg.step
            fd[k] = (evaluate_loss(tp, pairs, problem, weights).total
                     - evaluate_loss(tm, pairs, problem, weights).total) / (2 * cfg.step)
        for g in GROUPS:
            m = problem.layout.group_mask(g)
            err = np.abs(grad[m] - fd[m]).max() / max(np.abs(fd[m]).max(), cfg.floor)
            worst[g] = max(worst[g], float(err))
    return GradcheckReport(worst, cfg.tolerance)
