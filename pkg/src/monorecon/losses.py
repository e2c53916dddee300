"""Photometric, geometric and anchor-regularization terms.

The ``*_terms`` kernels work on already-sampled values for a batch of
keyframe pairs and return one mean per pair; the single-pair functions
below them do the sampling first and are what most callers want.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .geometry import EPS_DEPTH, _tensor, sample_bilinear


@dataclass(frozen=True)
class LossWeights:
    pc: float
    gc: float
    regu: float

    def __post_init__(self):
        if min(self.pc, self.gc, self.regu) < 0:
            raise ValueError(f"loss weights must be non-negative: {self}")

    def scaled(self, factor: float) -> "LossWeights":
        return LossWeights(self.pc * factor, self.gc * factor, self.regu * factor)


@dataclass
class LossBreakdown:
    pc: float
    gc: float
    regu: float
    total: float


def _masked_mean(per_pixel: torch.Tensor, valid: torch.Tensor):
    count = valid.sum(-1)
    total = torch.where(valid, per_pixel, torch.zeros_like(per_pixel)).sum(-1)
    mean = total / count.clamp_min(1).to(per_pixel.dtype)
    return mean, count == 0


def photometric_terms(src: torch.Tensor, tgt: torch.Tensor, valid: torch.Tensor):
    """Mean over valid pixels of the channel-averaged L1 colour difference.

    ``src`` and ``tgt`` are ``(..., N, C)``; returns ``(means, no_overlap)``.
    """
    per_pixel = (src - tgt).abs().mean(-1)
    return _masked_mean(per_pixel, valid)


def geometric_valid(tgt_depth: torch.Tensor, warped_depth: torch.Tensor, valid: torch.Tensor):
    return valid & ((tgt_depth + warped_depth).detach() >= 2 * EPS_DEPTH)


def geometric_terms(tgt_depth: torch.Tensor, warped_depth: torch.Tensor, valid: torch.Tensor):
    """Mean of ``|a - b| / (a + b)`` over valid pixels; returns ``(means, no_overlap)``."""
    valid = geometric_valid(tgt_depth, warped_depth, valid)
    denom = torch.where(valid, tgt_depth + warped_depth, torch.ones_like(tgt_depth))
    per_pixel = (tgt_depth - warped_depth).abs() / denom
    return _masked_mean(per_pixel, valid)


def photometric_loss(img_i, img_j, u_ij, v_ij, valid, mask_j=None):
    """Photometric term for one pair; ``u_ij``/``v_ij``/``valid`` are ``H x W``.

    Returns ``(loss, no_overlap)``; a pair without overlap scores 0.
    """
    Ii = _tensor(img_i)
    if Ii.ndim == 2:
        Ii = Ii[..., None]
    H, W = Ii.shape[:2]
    samples, ok = sample_bilinear(_tensor(img_j), _tensor(u_ij).reshape(-1),
                                  _tensor(v_ij).reshape(-1), mask_j)
    if samples.ndim == 1:
        samples = samples[:, None]
    ok = ok & _tensor(valid, torch.bool).reshape(-1)
    mean, empty = photometric_terms(Ii.reshape(H * W, -1), samples, ok)
    return (mean if isinstance(img_i, torch.Tensor) else float(mean)), bool(empty)


def geometric_loss(depth_j, warped_depth, u_ij, v_ij, valid, mask_j=None):
    """Geometric term for one pair; ``warped_depth`` is the ``i -> j`` depth map."""
    Dj = _tensor(depth_j)
    m = mask_j if mask_j is not None else (Dj > EPS_DEPTH)
    samples, ok = sample_bilinear(Dj, _tensor(u_ij).reshape(-1), _tensor(v_ij).reshape(-1), m)
    ok = ok & _tensor(valid, torch.bool).reshape(-1)
    mean, empty = geometric_terms(samples, _tensor(warped_depth).reshape(-1), ok)
    return (mean if isinstance(depth_j, torch.Tensor) else float(mean)), bool(empty)


def regularization_loss(omegas):
    """Plain double sum of ``|1 - omega|`` over every frame and anchor."""
    om = _tensor(omegas)
    out = (1.0 - om).abs().sum()
    return out if isinstance(omegas, torch.Tensor) else float(out)


def total_loss(pc, gc, regu, w: LossWeights):
    total = w.pc * pc + w.gc * gc + w.regu * regu
    if isinstance(total, torch.Tensor):
        return total
    return LossBreakdown(float(pc), float(gc), float(regu), float(total))


def as_breakdown(pc, gc, regu, w: LossWeights) -> LossBreakdown:
    vals = [float(x.detach()) if isinstance(x, torch.Tensor) else float(x) for x in (pc, gc, regu)]
    return total_loss(*vals, w)

