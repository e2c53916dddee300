"""Depth, trajectory, intrinsics and point-cloud metrics against ground truth."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree


class MetricError(ValueError):
    pass


@dataclass
class MetricsReport:
    abs_rel: float
    delta1: float
    ate: float
    rpe_t: float
    rpe_r_deg: float
    fov_abs_rel: float
    chamfer_l1: float
    f_score: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def median_scale(pred_depths, gt_depths) -> float:
    """Ratio of sequence-wide GT median to predicted median over shared valid pixels."""
    p, g = _overlap(pred_depths, gt_depths)
    return float(np.median(g) / np.median(p))


def _overlap(pred_depths, gt_depths):
    ps, gs = [], []
    for p, g in zip(pred_depths, gt_depths):
        p = np.asarray(p, float)
        g = np.asarray(g, float)
        ok = np.isfinite(p) & np.isfinite(g) & (p > 0) & (g > 0)
        ps.append(p[ok])
        gs.append(g[ok])
    p, g = np.concatenate(ps), np.concatenate(gs)
    if p.size == 0:
        raise MetricError("no overlapping valid depth pixels")
    return p, g


def metric_depth(pred_depths, gt_depths, align: bool = True) -> tuple[float, float]:
    """AbsRel and delta1 (strict ``< 1.25``) after one sequence-wide median scale."""
    p, g = _overlap(pred_depths, gt_depths)
    if align:
        p = p * (np.median(g) / np.median(p))
    abs_rel = float(np.mean(np.abs(p - g) / g))
    delta1 = float(np.mean(np.maximum(p / g, g / p) < 1.25))
    return abs_rel, delta1


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = True):
    """Similarity ``(s, R, t)`` minimising ``sum ||s R src + t - dst||^2``.

    When the points are (nearly) collinear the twist about their common line
    is unobservable; the smallest rotation taking one line onto the other is
    used instead of whatever the SVD happens to return.
    """
    src, dst = np.asarray(src, float), np.asarray(dst, float)
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    var_s = (xs ** 2).sum() / len(src)
    cov = xd.T @ xs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    if D[0] <= 1e-15 or D[1] <= 1e-9 * D[0]:
        R = _line_rotation(xs, xd)
        Dsum = D[0]
    else:
        S = np.eye(3)
        if np.linalg.det(U) * np.linalg.det(Vt) < 0:
            S[2, 2] = -1
        R = U @ S @ Vt
        Dsum = (D * np.diag(S)).sum()
    s = Dsum / var_s if with_scale and var_s > 0 else 1.0
    t = mu_d - s * R @ mu_s
    return float(s), R, t


def _principal(x: np.ndarray) -> np.ndarray:
    _, _, Vt = np.linalg.svd(x, full_matrices=False)
    a = Vt[0]
    # orient along the point ordering so both lines agree in direction
    if (x[-1] - x[0]) @ a < 0:
        a = -a
    return a


def _line_rotation(xs: np.ndarray, xd: np.ndarray) -> np.ndarray:
    if not np.any(xs) or not np.any(xd):
        return np.eye(3)
    a, b = _principal(xs), _principal(xd)
    v = np.cross(a, b)
    c = float(a @ b)
    if np.linalg.norm(v) < 1e-12:
        if c > 0:
            return np.eye(3)
        perp = np.cross(a, [1.0, 0, 0])
        if np.linalg.norm(perp) < 1e-6:
            perp = np.cross(a, [0, 1.0, 0])
        perp /= np.linalg.norm(perp)
        return 2 * np.outer(perp, perp) - np.eye(3)
    vx = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
    return np.eye(3) + vx + vx @ vx / (1 + c)


def apply_similarity(poses: np.ndarray, s: float, R: np.ndarray, t: np.ndarray) -> np.ndarray:
    out = np.array(poses, dtype=float, copy=True)
    out[:, :3, :3] = R @ out[:, :3, :3]
    out[:, :3, 3] = s * out[:, :3, 3] @ R.T + t
    return out


def _angle(R: np.ndarray) -> float:
    return math.acos(float(np.clip((np.trace(R) - 1) / 2, -1.0, 1.0)))


def metric_trajectory(pred: np.ndarray, gt: np.ndarray):
    """ATE, RPE-T (translation RMSE) and RPE-R (rotation RMSE, degrees).

    Predicted poses are first aligned to GT by a closed-form similarity over
    the camera centres. Returns ``(ate, rpe_t, rpe_r_deg, (s, R, t))``.
    """
    pred, gt = np.asarray(pred, float), np.asarray(gt, float)
    if pred.shape != gt.shape:
        raise MetricError(f"trajectory length mismatch: {pred.shape} vs {gt.shape}")
    if len(pred) < 2:
        raise MetricError("need at least two poses")
    s, R, t = umeyama(pred[:, :3, 3], gt[:, :3, 3])
    aligned = apply_similarity(pred, s, R, t)
    ate = float(np.sqrt(np.mean(np.sum((aligned[:, :3, 3] - gt[:, :3, 3]) ** 2, 1))))
    et, er = [], []
    for i in range(len(gt) - 1):
        rel_g = np.linalg.inv(gt[i]) @ gt[i + 1]
        rel_p = np.linalg.inv(aligned[i]) @ aligned[i + 1]
        E = np.linalg.inv(rel_g) @ rel_p
        et.append(np.sum(E[:3, 3] ** 2))
        er.append(_angle(E[:3, :3]) ** 2)
    rpe_t = float(np.sqrt(np.mean(et)))
    rpe_r = float(np.degrees(np.sqrt(np.mean(er))))
    return ate, rpe_t, rpe_r, (s, R, t)


def fov(width: float, focal: float) -> float:
    return 2.0 * math.atan(width / (2.0 * focal))


def fov_abs_rel(fov_pred: float, fov_gt: float) -> float:
    return abs(fov_pred - fov_gt) / fov_gt


def metric_fov(delta: float, f0: float, gt_focal: float, width: int) -> float:
    if delta * f0 <= 0 or gt_focal <= 0:
        raise MetricError("focal lengths must be positive")
    return fov_abs_rel(fov(width, delta * f0), fov(width, gt_focal))


def metric_cloud(pred: np.ndarray, gt: np.ndarray, tau: float, similarity=None):
    """Chamfer-l1 (mean of both directions, halved) and F-score at ``tau``.

    ``similarity`` is an optional ``(s, R, t)`` applied to ``pred`` first.
    """
    pred, gt = np.asarray(pred, float).reshape(-1, 3), np.asarray(gt, float).reshape(-1, 3)
    if len(pred) == 0 or len(gt) == 0:
        raise MetricError("empty point cloud")
    if similarity is not None:
        s, R, t = similarity
        pred = s * pred @ R.T + t
    d_pg, _ = cKDTree(gt).query(pred)
    d_gp, _ = cKDTree(pred).query(gt)
    chamfer = 0.5 * (d_pg.mean() + d_gp.mean())
    precision = float(np.mean(d_pg < tau))
    recall = float(np.mean(d_gp < tau))
    f = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return float(chamfer), float(f)
