"""Frame downsampling and keyframe-pair sampling schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass

import cv2
import numpy as np

from .geometry import InvalidArgument


@dataclass
class SamplerConfig:
    k: int = 6
    phi: float = math.pi / 4
    sigma: float = 0.85
    refs_per_step: int = 50
    lookahead: int = 20
    inserts: int = 3
    refresh_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise InvalidArgument("k must be >= 1")
        if not 0 < self.phi < math.pi:
            raise InvalidArgument("phi must lie in (0, pi)")
        if not 0 < self.sigma <= 1:
            raise InvalidArgument("sigma must lie in (0, 1]")


@dataclass
class KeyframeSchedule:
    """Row ``i`` holds the normalised pairing weights of reference frame ``i``."""

    weights: np.ndarray
    isolated: np.ndarray

    @property
    def size(self) -> int:
        return self.weights.shape[0]

    def candidates(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.weights[i])


def _thumbnail(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float32)
    gray = img.mean(-1) if img.ndim == 3 else img
    return cv2.resize(gray, (32, 24), interpolation=cv2.INTER_AREA).astype(np.float64)


def similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Zero-mean normalised cross-correlation of 32x24 grayscale thumbnails."""
    ta, tb = _thumbnail(a), _thumbnail(b)
    ta -= ta.mean()
    tb -= tb.mean()
    na, nb = np.linalg.norm(ta), np.linalg.norm(tb)
    if na < 1e-12 or nb < 1e-12:
        return 1.0 if np.allclose(ta, tb) and (na < 1e-12) == (nb < 1e-12) else 0.0
    return float((ta * tb).sum() / (na * nb))


def downsample_frames(frames, cfg: SamplerConfig | None = None) -> list[int]:
    """Two-stage selection: similarity-drop walk, then even in-filling.

    Stage one keeps frame 0 and walks forward; from the current pivot it
    scores up to ``cfg.lookahead`` following frames and selects the first one
    whose similarity drops below ``sigma``, which becomes the new pivot. If
    nothing in the window drops, the pivot moves to the window end without
    selecting. Stage two inserts up to ``cfg.inserts`` evenly spaced frames
    between consecutive stage-one picks.
    """
    cfg = cfg or SamplerConfig()
    n = len(frames)
    if n == 0:
        raise InvalidArgument("cannot downsample an empty frame list")
    coarse = [0]
    pivot = 0
    while pivot < n - 1:
        window = range(pivot + 1, min(pivot + cfg.lookahead, n - 1) + 1)
        hit = next((j for j in window if similarity(frames[pivot], frames[j]) < cfg.sigma), None)
        if hit is None:
            pivot = window[-1]
            continue
        coarse.append(hit)
        pivot = hit
    picked = set(coarse)
    for a, b in zip(coarse, coarse[1:]):
        count = min(cfg.inserts, b - a - 1)
        for q in range(1, count + 1):
            picked.add(int(math.floor(a + q * (b - a) / (count + 1) + 0.5)))
    return sorted(picked)


def local_weights(P: int, k: int) -> np.ndarray:
    """Unnormalised local weights: ``1/k`` on the ``k`` temporally nearest frames.

    Ties in temporal distance resolve toward the earlier frame.
    """
    if P < 2:
        raise InvalidArgument(f"need at least 2 frames, got {P}")
    W = np.zeros((P, P))
    idx = np.arange(P)
    for i in range(P):
        others = idx[idx != i]
        order = np.lexsort((others, np.abs(others - i)))
        W[i, others[order[:k]]] = 1.0 / k
    return W


def _normalise(W: np.ndarray) -> KeyframeSchedule:
    sums = W.sum(1, keepdims=True)
    isolated = sums[:, 0] <= 0
    out = np.divide(W, sums, out=np.zeros_like(W), where=sums > 0)
    return KeyframeSchedule(out, isolated)


def local_probabilities(P: int, k: int) -> KeyframeSchedule:
    return _normalise(local_weights(P, k))


def relative_angle(P_i, P_j) -> float:
    """Rotation angle in radians between two camera-to-world poses."""
    R = np.asarray(P_i)[:3, :3].T @ np.asarray(P_j)[:3, :3]
    c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.arccos(c))


def tent(theta, phi: float):
    """Piecewise-linear angle preference, peaking at ``1/phi`` when ``theta == phi``."""
    theta = np.asarray(theta, dtype=np.float64)
    rising = (theta > 0) & (theta <= phi)
    falling = (theta > phi) & (theta < 2 * phi)
    return np.where(rising, theta / phi ** 2, np.where(falling, 2 / phi - theta / phi ** 2, 0.0))


def global_weights(poses, cfg: SamplerConfig) -> np.ndarray:
    """Unnormalised global weights ``(p_l + tent(theta)) / 2``."""
    poses = np.asarray(poses)
    P = len(poses)
    R = poses[:, :3, :3]
    rel = np.einsum("iba,jbc->ijac", R, R)
    cos = np.clip((np.trace(rel, axis1=2, axis2=3) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos)
    W = (local_weights(P, cfg.k) + tent(theta, cfg.phi)) / 2.0
    np.fill_diagonal(W, 0.0)
    return W


def global_probabilities(poses, cfg: SamplerConfig) -> KeyframeSchedule:
    W = global_weights(poses, cfg)
    fallback = local_weights(len(W), cfg.k)
    empty = W.sum(1) <= 0
    W[empty] = fallback[empty]
    return _normalise(W)


def sample_pairs(schedule: KeyframeSchedule, refs_per_step: int,
                 rng: np.random.Generator) -> list[tuple[int, int]]:
    """Draw reference frames without replacement, then one partner each."""
    P = schedule.size
    if P < 2:
        raise InvalidArgument(f"need at least 2 frames, got {P}")
    pool = np.flatnonzero(~schedule.isolated)
    refs = rng.choice(pool, size=min(refs_per_step, len(pool)), replace=False)
    cdf = np.cumsum(schedule.weights[refs], axis=1)
    u = rng.random(len(refs)) * cdf[:, -1]
    partners = (cdf <= u[:, None]).sum(1)
    last = P - 1 - np.argmax(schedule.weights[refs][:, ::-1] > 0, axis=1)
    partners = np.minimum(partners, last)
    return [(int(i), int(j)) for i, j in zip(refs, partners)]
