"""Pinhole camera, pose parameterization, bilinear sampling and warping.

Every function here accepts either numpy arrays or torch tensors and returns
the same kind it was given, so the optimizer can differentiate through the
exact code the tests exercise with numpy inputs.

Conventions:
    * Camera frame is x right, y down, z forward.
    * Poses are 4x4 camera-to-world matrices.
    * Euler angles are intrinsic X-then-Y-then-Z, i.e. ``R = Rx(a) @ Ry(b) @ Rz(c)``.
    * Pixel ``(u, v)`` addresses column ``u`` and row ``v``; integer
      coordinates are pixel centres.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import torch

EPS_DEPTH = 1e-6


class InvalidArgument(ValueError):
    """Raised when an operation's precondition is violated."""


def _tensor(x, dtype=torch.float64) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=dtype)


def _back(x: torch.Tensor, like):
    """Return ``x`` as numpy unless ``like`` was a tensor."""
    if isinstance(like, torch.Tensor):
        return x
    return x.detach().cpu().numpy()


class Stage(enum.IntEnum):
    AFFINE_INVARIANT = 0
    GLOBALLY_ALIGNED = 1
    SCALE_CONSISTENT = 2


@dataclass
class DepthMap:
    """An ``H x W`` depth grid tagged with its rectification stage.

    Pixels that are non-finite or ``<= EPS_DEPTH`` are always invalid; an
    optional extra ``mask`` (e.g. sky) can only remove pixels.
    """

    values: np.ndarray
    stage: Stage = Stage.AFFINE_INVARIANT
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise InvalidArgument(f"depth map must be 2-D, got shape {self.values.shape}")
        ok = np.isfinite(self.values) & (self.values > EPS_DEPTH)
        if self.mask is not None:
            ok &= np.asarray(self.mask, dtype=bool)
        self.mask = ok

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def require(self, stage: Stage) -> None:
        if self.stage != stage:
            raise InvalidArgument(f"expected a {stage.name} depth map, got {self.stage.name}")


def init_focal(width: int, height: int) -> float:
    """Base focal length ``1.2 * max(W, H)`` in pixels."""
    if width < 1 or height < 1:
        raise InvalidArgument(f"image size must be positive, got {width}x{height}")
    return 1.2 * max(width, height)


@dataclass
class Intrinsics:
    delta: float
    f0: float
    width: int
    height: int

    @classmethod
    def initial(cls, width: int, height: int) -> "Intrinsics":
        return cls(1.0, init_focal(width, height), width, height)

    @property
    def focal(self) -> float:
        return self.delta * self.f0

    def fov(self) -> float:
        """Horizontal field of view in radians."""
        return 2.0 * np.arctan(self.width / (2.0 * self.focal))


def intrinsics_matrix(intr: Intrinsics) -> np.ndarray:
    if not intr.delta > 0:
        raise InvalidArgument(f"focal scalar must be positive, got {intr.delta}")
    return np.asarray(
        intrinsics_matrix_t(torch.tensor(float(intr.delta), dtype=torch.float64),
                            intr.f0, intr.width, intr.height))


def intrinsics_matrix_t(delta: torch.Tensor, f0: float, width: int, height: int) -> torch.Tensor:
    """Differentiable ``K`` with ``delta * f0`` on the diagonal, centre principal point."""
    f = delta * f0
    zero = torch.zeros_like(f)
    one = torch.ones_like(f)
    rows = [
        torch.stack([f, zero, zero + width / 2.0]),
        torch.stack([zero, f, zero + height / 2.0]),
        torch.stack([zero, zero, one]),
    ]
    return torch.stack(rows)


def euler_to_rotation(r):
    """Rotation matrices from intrinsic XYZ Euler angles, shape ``(..., 3) -> (..., 3, 3)``."""
    rt = _tensor(r)
    if not torch.isfinite(rt).all():
        raise InvalidArgument("Euler angles must be finite")
    a, b, c = rt[..., 0], rt[..., 1], rt[..., 2]
    ca, sa = torch.cos(a), torch.sin(a)
    cb, sb = torch.cos(b), torch.sin(b)
    cc, sc = torch.cos(c), torch.sin(c)
    # Rx(a) @ Ry(b) @ Rz(c), expanded
    R = torch.stack([
        torch.stack([cb * cc, -cb * sc, sb], -1),
        torch.stack([sa * sb * cc + ca * sc, -sa * sb * sc + ca * cc, -sa * cb], -1),
        torch.stack([-ca * sb * cc + sa * sc, ca * sb * sc + sa * cc, ca * cb], -1),
    ], -2)
    return _back(R, r)


def rotation_to_euler(R: np.ndarray) -> np.ndarray:
    """Inverse of :func:`euler_to_rotation` (numpy only)."""
    from scipy.spatial.transform import Rotation

    return Rotation.from_matrix(np.asarray(R)).as_euler("XYZ")


@dataclass
class RelativePose:
    r: np.ndarray = field(default_factory=lambda: np.zeros(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))


def make_relative_pose(rp: RelativePose | tuple) -> np.ndarray:
    if isinstance(rp, RelativePose):
        r, t = rp.r, rp.t
    else:
        r, t = rp
    return _back(pose_from_rt(_tensor(r), _tensor(t)), r if isinstance(r, torch.Tensor) else None)


def pose_from_rt(r, t):
    """Batched ``(..., 3), (..., 3) -> (..., 4, 4)`` homogeneous transforms."""
    rt, tt = _tensor(r), _tensor(t)
    R = euler_to_rotation(rt)
    top = torch.cat([R, tt.unsqueeze(-1)], -1)
    bottom = torch.zeros(top.shape[:-2] + (1, 4), dtype=top.dtype)
    bottom[..., 0, 3] = 1.0
    return _back(torch.cat([top, bottom], -2), r)


def chain_poses(relatives):
    """Accumulate ``P-1`` relative transforms into ``P`` camera-to-world poses.

    ``out[0]`` is the identity and ``out[i] = out[i-1] @ relatives[i-1]``.
    Accepts a list of 4x4 matrices or a stacked ``(P-1, 4, 4)`` array/tensor.
    """
    if isinstance(relatives, (list, tuple)):
        if len(relatives) and isinstance(relatives[0], torch.Tensor):
            rel = torch.stack(list(relatives))
        else:
            rel = np.asarray(relatives, dtype=np.float64).reshape(-1, 4, 4)
    else:
        rel = relatives
    is_t = isinstance(rel, torch.Tensor)
    eye = torch.eye(4, dtype=torch.float64) if is_t else np.eye(4)
    out = [eye]
    for k in range(rel.shape[0]):
        out.append(out[-1] @ rel[k])
    return torch.stack(out) if is_t else np.stack(out)


def invert_pose(P):
    R = P[..., :3, :3]
    t = P[..., :3, 3:]
    Rt = R.transpose(-1, -2) if isinstance(P, torch.Tensor) else np.swapaxes(R, -1, -2)
    out = P.clone() if isinstance(P, torch.Tensor) else P.copy()
    out[..., :3, :3] = Rt
    out[..., :3, 3:] = -(Rt @ t)
    return out


def sample_bilinear(values, u, v, mask=None):
    """Bilinearly sample ``values`` (``H x W`` or ``H x W x C``) at ``(u, v)``.

    Returns ``(samples, valid)``. A sample is invalid when its 2x2 support
    leaves the image or touches a pixel with ``mask == False``; invalid
    samples are zero. On the last row/column the support is shifted inward
    so integer coordinates always reproduce the stored value.
    """
    vals = _tensor(values)
    ut, vt = _tensor(u), _tensor(v)
    shape = ut.shape
    m = None if mask is None else _tensor(mask, torch.bool)[None]
    chans = vals[..., None] if vals.ndim == 2 else vals
    out, ok = sample_bilinear_batch(chans[None], ut.reshape(1, -1), vt.reshape(1, -1), m)
    out = out[0].reshape(shape + chans.shape[-1:])
    if vals.ndim == 2:
        out = out[..., 0]
    return _back(out, values), _back(ok[0].reshape(shape), values)


def sample_bilinear_batch(values: torch.Tensor, u: torch.Tensor, v: torch.Tensor,
                          mask: torch.Tensor | None = None, zero_invalid: bool = True):
    """Batched sampler: ``values`` is ``(B, H, W, C)``, ``u``/``v`` are ``(B, N)``.

    The four support pixels are gathered explicitly and blended with
    ``torch.lerp``, which is exact at both ends of its range, so integer
    coordinates reproduce stored values bit-exactly. Differentiable in both
    the values and the coordinates. With ``zero_invalid=False`` invalid
    samples hold unspecified finite-or-not values and the caller must mask.
    """
    B, H, W, C = values.shape
    inside = (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
    # NaN and far-away coordinates must not reach the integer cast
    ud, vd = u.detach(), v.detach()
    u0 = torch.floor(torch.where(inside, ud, torch.zeros_like(ud))).clamp_(0, max(W - 2, 0))
    v0 = torch.floor(torch.where(inside, vd, torch.zeros_like(vd))).clamp_(0, max(H - 2, 0))
    i00 = (v0 * W + u0).long()
    dx = 1 if W > 1 else 0
    dy = W if H > 1 else 0
    N = u.shape[1]
    idx = torch.cat([i00, i00 + dx, i00 + dy, i00 + dx + dy], 1)  # (B, 4N)
    flat = values.reshape(B, H * W, C)
    corners = torch.gather(flat, 1, idx.unsqueeze(-1).expand(-1, -1, C)).reshape(B, 4, N, C)
    gu = (u - u0).unsqueeze(-1)
    gv = (v - v0).unsqueeze(-1)
    # unbind keeps the backward pass a single stack instead of four zero-filled copies
    c00, c10, c01, c11 = corners.unbind(1)
    top = torch.lerp(c00, c10, gu)
    bottom = torch.lerp(c01, c11, gu)
    out = torch.lerp(top, bottom, gv)
    valid = inside
    if mask is not None:
        mflat = mask.reshape(B, H * W)
        valid = valid & torch.gather(mflat, 1, idx).reshape(B, 4, N).all(1)
    if zero_invalid:
        out = torch.where(valid.unsqueeze(-1), out, torch.zeros_like(out))
    return out, valid


def warp_points(u, v, d, K, P_i, P_j, width: int, height: int, eps: float = EPS_DEPTH):
    """Warp pixels of frame ``i`` with depth ``d`` into frame ``j``.

    Implements ``d_ij * p_ij = K R_j^T (R_i K^-1 d p + t_i - t_j)`` over
    broadcastable batches. Returns ``(u_ij, v_ij, d_ij, valid)`` where
    ``valid`` requires positive source depth, warped depth ``> eps`` and a
    landing point inside ``[0, W-1] x [0, H-1]``.
    """
    like = d
    ut, vt, dt = _tensor(u), _tensor(v), _tensor(d)
    Kt, Pi, Pj = _tensor(K), _tensor(P_i), _tensor(P_j)
    fx, fy, cx, cy = Kt[..., 0, 0], Kt[..., 1, 1], Kt[..., 0, 2], Kt[..., 1, 2]
    fx, fy, cx, cy = (x[..., None] if x.ndim else x for x in (fx, fy, cx, cy))
    shape = torch.broadcast_shapes(ut.shape, vt.shape, dt.shape)
    ut, vt = ut.expand(shape), vt.expand(shape)
    xn = (ut - cx) / fx
    yn = (vt - cy) / fy
    ray = torch.stack(torch.broadcast_tensors(xn, yn, torch.ones_like(dt)), -2)  # (..., 3, N)
    rel = invert_pose(Pj) @ Pi
    Rrel, trel = rel[..., :3, :3], rel[..., :3, 3:]
    # the point divided by the source depth; written so that an identity
    # relative pose maps every pixel onto itself bit-exactly
    pos = dt > 0
    inv_d = 1.0 / torch.where(pos, dt, torch.ones_like(dt))
    q = Rrel @ ray + trel * inv_d.unsqueeze(-2)
    dj = dt * q[..., 2, :]
    front = pos & (dj > eps)
    qz = torch.where(front, q[..., 2, :], torch.ones_like(dj))
    uj = ut + fx * (q[..., 0, :] / qz - xn)
    vj = vt + fy * (q[..., 1, :] / qz - yn)
    valid = front & (uj >= 0) & (uj <= width - 1) & (vj >= 0) & (vj <= height - 1)
    return _back(uj, like), _back(vj, like), _back(dj, like), _back(valid, like)


def warp_point(p, d, K, P_i, P_j, width: int, height: int):
    """Single-point convenience wrapper around :func:`warp_points`."""
    uj, vj, dj, ok = warp_points(np.array([p[0]], float), np.array([p[1]], float),
                                 np.array([d], float), K, P_i, P_j, width, height)
    return (float(uj[0]), float(vj[0])), float(dj[0]), bool(ok[0])


def pixel_grid(height: int, width: int):
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    return u, v

