"""Analytic synthetic scenes with exact depth, plus affine depth corruption.

Scenes are built from a textured ground plane, axis-aligned boxes and
spheres. Depth is obtained by casting the pixel-centre ray whose camera-frame
direction has unit z component, so the ray parameter at the hit *is* the
z-depth and no renormalisation error enters the ground truth. Colours are
supersampled to keep the photometric signal smooth at low resolution.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import EPS_DEPTH, DepthMap, InvalidArgument, Stage


class SceneError(ValueError):
    pass


@dataclass
class Texture:
    kind: str = "checker"  # checker | noise
    scale: float = 0.5
    seed: int = 0
    color_a: tuple = (0.85, 0.75, 0.55)
    color_b: tuple = (0.2, 0.3, 0.45)
    noise_weight: float = 0.35


@dataclass
class Primitive:
    type: str  # plane | box | sphere
    params: dict
    texture: Texture = field(default_factory=Texture)

    @classmethod
    def from_dict(cls, d: dict) -> "Primitive":
        d = dict(d)
        tex = Texture(**d.pop("texture", {}))
        kind = d.pop("type")
        return cls(kind, d, tex)

    def to_dict(self) -> dict:
        return {"type": self.type, **self.params, "texture": asdict(self.texture)}


@dataclass
class OrbitTrajectory:
    """Camera on an arc around ``target``, always looking at it."""

    target: tuple = (0.0, 1.3, 4.5)
    radius: float = 3.2
    height: float = -1.0  # camera y (world y points down)
    start_deg: float = -20.0
    sweep_deg: float = 38.0
    radial_wobble: float = 0.25
    height_wobble: float = 0.15
    pure_rotation_frames: int = 0
    pure_rotation_deg: float = 2.0


@dataclass
class SceneSpec:
    width: int = 64
    height: int = 48
    focal: float = 60.0
    frames: int = 20
    supersample: int = 4
    primitives: list = field(default_factory=list)
    trajectory: OrbitTrajectory = field(default_factory=OrbitTrajectory)

    @classmethod
    def default(cls) -> "SceneSpec":
        prims = [
            Primitive("plane", {"point": [0.0, 1.5, 0.0], "normal": [0.0, -1.0, 0.0]},
                      Texture("checker", 0.6, 1, (0.82, 0.78, 0.6), (0.25, 0.35, 0.3), 0.4)),
            Primitive("box", {"min": [-1.6, 0.5, 4.4], "max": [-0.6, 1.5, 5.4]},
                      Texture("noise", 0.25, 2, (0.9, 0.4, 0.3), (0.3, 0.1, 0.15), 1.0)),
            Primitive("box", {"min": [0.7, 0.2, 5.0], "max": [1.5, 1.5, 5.8]},
                      Texture("checker", 0.3, 3, (0.3, 0.5, 0.9), (0.9, 0.9, 0.8), 0.3)),
            Primitive("sphere", {"center": [0.1, 1.0, 3.6], "radius": 0.5},
                      Texture("checker", 0.2, 4, (0.95, 0.85, 0.2), (0.2, 0.2, 0.6), 0.3)),
            Primitive("sphere", {"center": [-0.3, 1.2, 6.3], "radius": 0.3},
                      Texture("noise", 0.12, 5, (0.2, 0.8, 0.4), (0.05, 0.25, 0.1), 1.0)),
        ]
        return cls(primitives=prims)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        prims = [Primitive.from_dict(p) for p in d.pop("primitives", [])]
        traj = OrbitTrajectory(**{k: tuple(v) if isinstance(v, list) else v
                                  for k, v in d.pop("trajectory", {}).items()})
        spec = cls(primitives=prims, trajectory=traj, **d)
        if not spec.primitives:
            spec.primitives = cls.default().primitives
        return spec

    def to_dict(self) -> dict:
        out = asdict(self)
        out["primitives"] = [p.to_dict() for p in self.primitives]
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @property
    def total_frames(self) -> int:
        return self.frames + self.trajectory.pure_rotation_frames

    def intrinsics(self) -> np.ndarray:
        return np.array([[self.focal, 0, self.width / 2], [0, self.focal, self.height / 2], [0, 0, 1.0]])


def look_at(eye, target) -> np.ndarray:
    """Camera-to-world pose at ``eye`` facing ``target`` (world y is down)."""
    eye, target = np.asarray(eye, float), np.asarray(target, float)
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, [0.0, -1.0, 0.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    P = np.eye(4)
    P[:3, :3] = np.stack([x, y, z], 1)
    P[:3, 3] = eye
    return P


def trajectory_poses(spec: SceneSpec) -> np.ndarray:
    tr = spec.trajectory
    n = spec.frames
    target = np.asarray(tr.target, float)
    poses = []
    for i in range(n):
        s = i / max(n - 1, 1)
        ang = math.radians(tr.start_deg + tr.sweep_deg * s)
        r = tr.radius + tr.radial_wobble * math.sin(math.pi * s)
        eye = target + np.array([r * math.sin(ang), 0.0, -r * math.cos(ang)])
        eye[1] = tr.height + tr.height_wobble * math.sin(2 * math.pi * s)
        poses.append(look_at(eye, target))
    for k in range(tr.pure_rotation_frames):
        P = poses[-1].copy()
        a = math.radians(tr.pure_rotation_deg)
        Ry = np.array([[math.cos(a), 0, math.sin(a)], [0, 1, 0], [-math.sin(a), 0, math.cos(a)]])
        P[:3, :3] = P[:3, :3] @ Ry
        poses.append(P)
    return np.stack(poses)


# -- ray casting -------------------------------------------------------------

def _hit_plane(o, d, point, normal):
    n = np.asarray(normal, float)
    denom = d @ n
    num = (np.asarray(point, float) - o) @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        s = num / denom
    return np.where((np.abs(denom) > 1e-12) & (s > EPS_DEPTH), s, np.inf)


def _hit_sphere(o, d, center, radius):
    oc = o - np.asarray(center, float)
    a = np.einsum("ij,ij->i", d, d)
    b = 2.0 * d @ oc
    c = oc @ oc - radius * radius
    disc = b * b - 4 * a * c
    root = np.sqrt(np.maximum(disc, 0.0))
    s0 = (-b - root) / (2 * a)
    s1 = (-b + root) / (2 * a)
    s = np.where(s0 > EPS_DEPTH, s0, np.where(s1 > EPS_DEPTH, s1, np.inf))
    return np.where(disc >= 0, s, np.inf)


def _hit_box(o, d, lo, hi):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lo - o) * inv
        t2 = (hi - o) * inv
    tmin = np.nanmax(np.minimum(t1, t2), axis=1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=1)
    ok = (tmax >= tmin) & (tmax > EPS_DEPTH)
    s = np.where(tmin > EPS_DEPTH, tmin, tmax)
    return np.where(ok, s, np.inf)


def _inside(prim: Primitive, o) -> bool:
    p = prim.params
    if prim.type == "sphere":
        return np.linalg.norm(o - np.asarray(p["center"], float)) < p["radius"]
    if prim.type == "box":
        return bool(np.all(o > np.asarray(p["min"])) and np.all(o < np.asarray(p["max"])))
    if prim.type == "plane":
        return float((o - np.asarray(p["point"], float)) @ np.asarray(p["normal"], float)) <= 0
    raise SceneError(f"unknown primitive type {prim.type!r}")


def _intersect(prim: Primitive, o, d):
    p = prim.params
    if prim.type == "plane":
        return _hit_plane(o, d, p["point"], p["normal"])
    if prim.type == "sphere":
        return _hit_sphere(o, d, p["center"], p["radius"])
    if prim.type == "box":
        return _hit_box(o, d, p["min"], p["max"])
    raise SceneError(f"unknown primitive type {prim.type!r}")


def _value_noise(pts: np.ndarray, seed: int) -> np.ndarray:
    """Smooth 3-D lattice noise in [0, 1]."""
    rng = np.random.default_rng(seed)
    table = rng.random(4096)
    perm = rng.permutation(4096)
    base = np.floor(pts).astype(np.int64)
    f = pts - base
    f = f * f * (3 - 2 * f)

    def h(ix, iy, iz):
        return table[perm[(perm[(perm[ix % 4096] + iy) % 4096] + iz) % 4096]]

    out = 0.0
    for dx in (0, 1):
        wx = f[:, 0] if dx else 1 - f[:, 0]
        for dy in (0, 1):
            wy = f[:, 1] if dy else 1 - f[:, 1]
            for dz in (0, 1):
                wz = f[:, 2] if dz else 1 - f[:, 2]
                out = out + wx * wy * wz * h(base[:, 0] + dx, base[:, 1] + dy, base[:, 2] + dz)
    return out


def _shade(tex: Texture, pts: np.ndarray) -> np.ndarray:
    q = pts / tex.scale
    noise = 0.6 * _value_noise(q, tex.seed) + 0.4 * _value_noise(2.7 * q + 11.0, tex.seed + 1)
    if tex.kind == "checker":
        parity = (np.floor(q).astype(np.int64).sum(1) % 2).astype(float)
        mix = (1 - tex.noise_weight) * parity + tex.noise_weight * noise
    elif tex.kind == "noise":
        mix = noise
    else:
        raise SceneError(f"unknown texture kind {tex.kind!r}")
    a, b = np.asarray(tex.color_a, float), np.asarray(tex.color_b, float)
    return np.clip(a[None] * (1 - mix[:, None]) + b[None] * mix[:, None], 0.0, 1.0)


def cast(spec: SceneSpec, pose: np.ndarray, u: np.ndarray, v: np.ndarray):
    """Cast rays through pixel coordinates; returns ``(z_depth, colour, hit)``."""
    o = pose[:3, 3]
    for prim in spec.primitives:
        if _inside(prim, o):
            raise SceneError(f"camera at {o} is inside a {prim.type}")
    K = spec.intrinsics()
    dc = np.stack([(u - K[0, 2]) / K[0, 0], (v - K[1, 2]) / K[1, 1], np.ones_like(u)], -1)
    d = dc @ pose[:3, :3].T
    best = np.full(len(u), np.inf)
    which = np.full(len(u), -1)
    for k, prim in enumerate(spec.primitives):
        s = _intersect(prim, o, d)
        closer = s < best
        best = np.where(closer, s, best)
        which = np.where(closer, k, which)
    hit = np.isfinite(best)
    color = np.zeros((len(u), 3))
    pts = o[None] + best[:, None] * d
    for k, prim in enumerate(spec.primitives):
        sel = which == k
        if sel.any():
            color[sel] = _shade(prim.texture, pts[sel])
    return np.where(hit, best, 0.0), color, hit


def render_scene(spec: SceneSpec, frame: int, poses: np.ndarray | None = None):
    """Render frame ``frame``; returns ``(image HxWx3, DepthMap)`` of GT z-depth."""
    poses = trajectory_poses(spec) if poses is None else poses
    pose = poses[frame]
    H, W = spec.height, spec.width
    v, u = np.mgrid[0:H, 0:W].astype(np.float64)
    depth, _, hit = cast(spec, pose, u.ravel(), v.ravel())
    n = spec.supersample
    offs = (np.arange(n) + 0.5) / n - 0.5
    acc = np.zeros((H * W, 3))
    for dy in offs:
        for dx in offs:
            _, c, _ = cast(spec, pose, u.ravel() + dx, v.ravel() + dy)
            acc += c
    img = (acc / (n * n)).reshape(H, W, 3)
    dm = DepthMap(depth.reshape(H, W), Stage.SCALE_CONSISTENT, hit.reshape(H, W))
    return img, dm


# -- corruption --------------------------------------------------------------

@dataclass
class CorruptionSpec:
    alpha_range: tuple = (0.5, 2.0)
    beta_range: tuple = (-0.2, 0.2)  # as a fraction of each frame's median GT depth
    field_amplitude: float = 0.0
    seed: int = 0
    alphas: list | None = None  # explicit per-frame values override the draws
    betas: list | None = None

    @classmethod
    def identity(cls) -> "CorruptionSpec":
        return cls(alphas=None, betas=None, alpha_range=(1.0, 1.0), beta_range=(0.0, 0.0))

    def draw(self, medians) -> tuple[np.ndarray, np.ndarray]:
        medians = np.asarray(medians, float)
        n = len(medians)
        rng = np.random.default_rng(self.seed)
        lo, hi = self.alpha_range
        # log-uniform so that 0.5x and 2x are equally likely
        alphas = np.exp(rng.uniform(np.log(lo), np.log(hi), n)) if hi > lo else np.full(n, lo)
        betas = rng.uniform(*self.beta_range, n) * medians
        if self.alphas is not None:
            alphas = np.asarray(self.alphas, float)
        if self.betas is not None:
            betas = np.asarray(self.betas, float)
        if np.any(alphas <= 0):
            raise InvalidArgument("corruption scales must be positive")
        return alphas, betas

    def smooth_field(self, height: int, width: int, frame: int) -> np.ndarray:
        if self.field_amplitude == 0:
            return np.ones((height, width))
        rng = np.random.default_rng([self.seed, frame, 7])
        ph = rng.uniform(0, 2 * np.pi, 2)
        v, u = np.mgrid[0:height, 0:width] / max(height, width)
        return 1.0 + self.field_amplitude * np.sin(2 * np.pi * u + ph[0]) * np.cos(np.pi * v + ph[1])


def corrupt_depth(gt: DepthMap, alpha: float, beta: float, field: np.ndarray | None = None) -> DepthMap:
    """Map GT depth to an affine-invariant map ``alpha * field * d + beta``."""
    d = gt.values if field is None else gt.values * field
    out = np.where(gt.mask, alpha * d + beta, 0.0)
    if np.any(out[gt.mask] <= EPS_DEPTH):
        raise InvalidArgument("corruption produces non-positive depth on visible surfaces")
    return DepthMap(out, Stage.AFFINE_INVARIANT, gt.mask)


@dataclass
class SyntheticSequence:
    spec: SceneSpec
    images: np.ndarray
    gt_depths: list
    depths: list
    poses: np.ndarray
    alphas: np.ndarray
    betas: np.ndarray


def make_sequence(spec: SceneSpec | None = None, corruption: CorruptionSpec | None = None) -> SyntheticSequence:
    spec = spec or SceneSpec.default()
    corruption = corruption or CorruptionSpec()
    poses = trajectory_poses(spec)
    images, gts = [], []
    for i in range(spec.total_frames):
        img, dm = render_scene(spec, i, poses)
        images.append(img)
        gts.append(dm)
    medians = [np.median(g.values[g.mask]) for g in gts]
    alphas, betas = corruption.draw(medians)
    depths = [corrupt_depth(g, a, b, corruption.smooth_field(spec.height, spec.width, i))
              for i, (g, a, b) in enumerate(zip(gts, alphas, betas))]
    return SyntheticSequence(spec, np.stack(images), gts, depths, poses, alphas, betas)
