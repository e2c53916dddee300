"""Global scale/shift correction followed by LWLR local scale/shift maps.

The local stage fits, at every pixel, a weighted ridge regression
``target ~ s * depth + theta`` to a sparse set of anchors whose targets are
the anchor depths multiplied by learnable weights. Only the shift ``theta``
is penalised, so an all-ones weight vector leaves the map untouched.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import EPS_DEPTH, DepthMap, InvalidArgument, Stage, _back, _tensor

logger = logging.getLogger(__name__)

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class DegenerateInput(ValueError):
    """No usable anchors, or too few to fit a scale and a shift."""


@dataclass
class LwlrConfig:
    bandwidth: float | None = None  # pixels; None means anchor grid spacing
    ridge: float = 0.1
    stride: int = 4

    def __post_init__(self):
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise InvalidArgument("bandwidth must be positive")
        if self.ridge < 0:
            raise InvalidArgument("ridge must be non-negative")
        if self.stride < 1:
            raise InvalidArgument("stride must be >= 1")

    def resolve_bandwidth(self, height: int, width: int, grid_side: int) -> float:
        if self.bandwidth is not None:
            return float(self.bandwidth)
        return max(width, height) / grid_side


@dataclass
class GlobalAffine:
    alpha: float = 1.0
    beta: float = 0.0


@dataclass
class AnchorSet:
    """Fixed anchor pixels plus their weights and (optionally) sampled depths."""

    u: np.ndarray
    v: np.ndarray
    omega: np.ndarray
    depths: np.ndarray | None = None
    valid: np.ndarray | None = None

    @property
    def count(self) -> int:
        return len(self.u)


@dataclass
class LocalAffineMaps:
    scale: np.ndarray
    shift: np.ndarray
    singular: bool = False


def softplus(x):
    return F.softplus(x) if isinstance(x, torch.Tensor) else np.logaddexp(0.0, x)


def inverse_softplus(y: float) -> float:
    """Raw parameter value that maps to ``y`` under softplus."""
    return float(y + np.log(-np.expm1(-y)))


def global_align(depth: DepthMap, g: GlobalAffine) -> DepthMap:
    depth.require(Stage.AFFINE_INVARIANT)
    out = g.alpha * depth.values + g.beta
    out = np.where(depth.mask, out, 0.0)
    return DepthMap(out, Stage.GLOBALLY_ALIGNED, depth.mask & (out > EPS_DEPTH))


def anchor_grid(height: int, width: int, count: int) -> tuple[np.ndarray, np.ndarray]:
    """Integer anchor pixels at the centres of a ``sqrt(M) x sqrt(M)`` partition."""
    side = math.isqrt(count)
    if side * side != count or count < 1:
        raise InvalidArgument(f"anchor count must be a perfect square, got {count}")
    if side > width or side > height:
        raise InvalidArgument(f"{side}x{side} anchor grid does not fit a {width}x{height} map")
    cu = np.floor((np.arange(side) + 0.5) * width / side).astype(np.int64)
    cv = np.floor((np.arange(side) + 0.5) * height / side).astype(np.int64)
    vv, uu = np.meshgrid(cv, cu, indexing="ij")
    return uu.ravel(), vv.ravel()


def sample_anchors(depth: DepthMap, count: int, omega: np.ndarray | None = None) -> AnchorSet:
    u, v = anchor_grid(depth.height, depth.width, count)
    valid = depth.mask[v, u]
    if not valid.any():
        raise DegenerateInput("every anchor lands on an invalid pixel")
    omega = np.ones(count) if omega is None else np.asarray(omega, dtype=np.float64)
    return AnchorSet(u, v, omega, depth.values[v, u].copy(), valid)


def _interp_matrix(n: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Coarse sample positions and the ``n x len(pos)`` linear upsampling matrix."""
    pos = np.arange(0, n, stride)
    if pos[-1] != n - 1:
        pos = np.append(pos, n - 1)
    mat = np.zeros((n, len(pos)))
    for x in range(n):
        k = min(np.searchsorted(pos, x, side="right") - 1, len(pos) - 2) if len(pos) > 1 else 0
        if len(pos) == 1:
            mat[x, 0] = 1.0
            continue
        a, b = pos[k], pos[k + 1]
        f = (x - a) / (b - a)
        mat[x, k] = 1.0 - f
        mat[x, k + 1] = f
    return pos, mat


class LwlrGrid:
    """Precomputed kernel weights and upsampling matrices for one image size.

    The anchor layout is fixed for a run, so everything that depends only on
    pixel geometry is computed once and reused every iteration.
    """

    def __init__(self, height: int, width: int, anchor_u, anchor_v, cfg: LwlrConfig):
        self.height, self.width = height, width
        self.cfg = cfg
        side = max(1, math.isqrt(len(anchor_u)))
        b = cfg.resolve_bandwidth(height, width, side)
        pu, mu = _interp_matrix(width, cfg.stride)
        pv, mv = _interp_matrix(height, cfg.stride)
        gv, gu = np.meshgrid(pv, pu, indexing="ij")
        du = gu.ravel()[:, None] - np.asarray(anchor_u, float)[None, :]
        dv = gv.ravel()[:, None] - np.asarray(anchor_v, float)[None, :]
        w = _INV_SQRT_2PI * np.exp(-(du ** 2 + dv ** 2) / (2.0 * b * b))
        self.kernel = torch.as_tensor(w)  # (coarse locations, M)
        self.coarse_shape = (len(pv), len(pu))
        self.up_v = torch.as_tensor(mv)
        self.up_u = torch.as_tensor(mu)
        self.bandwidth = b

    def solve(self, d: torch.Tensor, y: torch.Tensor, anchor_valid: torch.Tensor | None = None):
        """Scale and shift maps for anchor depths ``d`` and targets ``y``.

        ``d`` and ``y`` have shape ``(..., M)``. Returns ``(A, B, singular)``
        with ``A``, ``B`` of shape ``(..., H, W)``.
        """
        w = self.kernel
        if anchor_valid is not None:
            w = w * anchor_valid.to(w.dtype).unsqueeze(-2)
        # normal equations of [s, theta]
        d_ = d.unsqueeze(-2)
        y_ = y.unsqueeze(-2)
        s_dd = (w * d_ * d_).sum(-1)
        s_d = (w * d_).sum(-1)
        s_1 = w.sum(-1) + self.cfg.ridge
        s_dy = (w * d_ * y_).sum(-1)
        s_y = (w * y_).sum(-1)
        det = s_dd * s_1 - s_d * s_d
        tiny = 1e-12 * (s_dd * s_1).abs().clamp_min(1e-300)
        singular = det.abs() <= tiny
        safe = torch.where(singular, torch.ones_like(det), det)
        scale = (s_1 * s_dy - s_d * s_y) / safe
        shift = (s_dd * s_y - s_d * s_dy) / safe
        if bool(singular.any()):
            fallback = s_dy / s_dd.clamp_min(1e-300)
            scale = torch.where(singular, fallback, scale)
            shift = torch.where(singular, torch.zeros_like(shift), shift)
        shape = scale.shape[:-1] + self.coarse_shape
        A = self.up_v @ scale.reshape(shape) @ self.up_u.T
        B = self.up_v @ shift.reshape(shape) @ self.up_u.T
        return A, B, bool(singular.any())


def lwlr_solve(depth: DepthMap, anchors: AnchorSet, targets, cfg: LwlrConfig) -> LocalAffineMaps:
    """Local scale/shift maps fitting ``targets`` at the anchors of ``depth``."""
    valid = anchors.valid if anchors.valid is not None else depth.mask[anchors.v, anchors.u]
    if valid.sum() < 2:
        raise DegenerateInput(f"need at least 2 valid anchors, have {int(valid.sum())}")
    grid = LwlrGrid(depth.height, depth.width, anchors.u, anchors.v, cfg)
    d = torch.as_tensor(depth.values[anchors.v, anchors.u])
    y = _tensor(targets)
    A, B, singular = grid.solve(d, y, torch.as_tensor(valid))
    if singular:
        logger.warning("LWLR system singular at some locations; using ratio fallback")
    return LocalAffineMaps(_back(A, None), _back(B, None), singular)


def align_depth_t(depth_affine: torch.Tensor, alpha: torch.Tensor, beta: torch.Tensor,
                  omega: torch.Tensor, grid: LwlrGrid, anchor_u, anchor_v,
                  valid: torch.Tensor | None = None):
    """Differentiable full alignment for a batch of frames.

    ``depth_affine`` is ``(B, H, W)``, ``alpha``/``beta`` are ``(B,)``,
    ``omega`` is ``(B, M)``. Returns the scale-consistent depth ``(B, H, W)``.
    """
    dg = alpha[:, None, None] * depth_affine + beta[:, None, None]
    d_anchor = dg[:, anchor_v, anchor_u]
    anchor_ok = None
    if valid is not None:
        anchor_ok = valid[:, anchor_v, anchor_u] & (d_anchor.detach() > EPS_DEPTH)
    A, B, _ = grid.solve(d_anchor, omega * d_anchor, anchor_ok)
    return A * dg + B


def consistency_align(depth: DepthMap, g: GlobalAffine, anchors: AnchorSet,
                      cfg: LwlrConfig) -> DepthMap:
    depth.require(Stage.AFFINE_INVARIANT)
    dg = global_align(depth, g)
    sampled = AnchorSet(anchors.u, anchors.v, anchors.omega,
                        dg.values[anchors.v, anchors.u], dg.mask[anchors.v, anchors.u])
    if not sampled.valid.any():
        raise DegenerateInput("every anchor lands on an invalid pixel")
    maps = lwlr_solve(dg, sampled, sampled.omega * sampled.depths, cfg)
    out = maps.scale * dg.values + maps.shift
    ok = dg.mask & (out > EPS_DEPTH)
    return DepthMap(np.where(ok, out, 0.0), Stage.SCALE_CONSISTENT, ok)
