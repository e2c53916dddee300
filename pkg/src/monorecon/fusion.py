"""Back-projection, TSDF integration, zero-crossing extraction and exports."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import DepthMap, Stage, invert_pose, rotation_to_euler, euler_to_rotation


@dataclass
class PointCloud:
    points: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(self.colors) != len(self.points):
                raise ValueError("colours must align 1:1 with points")

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def concat(cls, clouds: list["PointCloud"]) -> "PointCloud":
        pts = np.concatenate([c.points for c in clouds]) if clouds else np.zeros((0, 3))
        if clouds and all(c.colors is not None for c in clouds):
            return cls(pts, np.concatenate([c.colors for c in clouds]))
        return cls(pts)


def unproject_frame(depth: DepthMap, K: np.ndarray, pose: np.ndarray, image=None) -> PointCloud:
    """World points ``P (K^-1 d p)`` for every valid pixel."""
    depth.require(Stage.SCALE_CONSISTENT)
    v, u = np.nonzero(depth.mask)
    d = depth.values[v, u]
    x = (u - K[0, 2]) / K[0, 0] * d
    y = (v - K[1, 2]) / K[1, 1] * d
    cam = np.stack([x, y, d], 1)
    pts = cam @ pose[:3, :3].T + pose[:3, 3]
    colors = None
    if image is not None:
        colors = np.asarray(image, float)[v, u]
    return PointCloud(pts, colors)


@dataclass
class TsdfVolume:
    origin: np.ndarray
    voxel_size: float
    truncation: float
    shape: tuple
    sdf: np.ndarray | None = None
    weight: np.ndarray | None = None

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        if self.truncation < self.voxel_size:
            raise ValueError("truncation must be at least one voxel")
        self.shape = tuple(int(n) for n in self.shape)
        if self.sdf is None:
            self.sdf = np.zeros(self.shape)
        if self.weight is None:
            self.weight = np.zeros(self.shape)

    @classmethod
    def around(cls, points: np.ndarray, voxel_size: float | None = None,
               truncation_voxels: float = 4.0, resolution: int = 128) -> "TsdfVolume":
        """Volume covering ``points`` padded by the truncation band.

        The default voxel size is the largest bounding-box side over ``resolution``.
        """
        lo, hi = points.min(0), points.max(0)
        if voxel_size is None:
            voxel_size = float((hi - lo).max()) / resolution
        trunc = truncation_voxels * voxel_size
        lo = lo - trunc
        hi = hi + trunc
        shape = np.ceil((hi - lo) / voxel_size).astype(int) + 1
        return cls(lo, voxel_size, trunc, tuple(shape))

    def centers(self) -> np.ndarray:
        idx = np.indices(self.shape).reshape(3, -1).T
        return self.origin + idx * self.voxel_size


def tsdf_integrate(volume: TsdfVolume, depth: DepthMap, K: np.ndarray, pose: np.ndarray) -> TsdfVolume:
    """Fuse one depth map (nearest-pixel lookup) into ``volume`` in place."""
    H, W = depth.values.shape
    world = volume.centers()
    T = invert_pose(np.asarray(pose, float))
    cam = world @ T[:3, :3].T + T[:3, 3]
    z = cam[:, 2]
    front = z > 1e-6
    zs = np.where(front, z, 1.0)
    u = np.rint(K[0, 0] * cam[:, 0] / zs + K[0, 2]).astype(np.int64)
    v = np.rint(K[1, 1] * cam[:, 1] / zs + K[1, 2]).astype(np.int64)
    ok = front & (u >= 0) & (u < W) & (v >= 0) & (v < H)
    uu, vv = np.where(ok, u, 0), np.where(ok, v, 0)
    ok &= depth.mask[vv, uu]
    sdf = depth.values[vv, uu] - z
    ok &= sdf >= -volume.truncation
    sdf = np.minimum(sdf, volume.truncation)
    flat_sdf = volume.sdf.reshape(-1)
    flat_w = volume.weight.reshape(-1)
    w_old = flat_w[ok]
    flat_sdf[ok] = (flat_sdf[ok] * w_old + sdf[ok]) / (w_old + 1.0)
    flat_w[ok] = w_old + 1.0
    return volume


def extract_surface_cloud(volume: TsdfVolume) -> PointCloud:
    """Linearly interpolated sign changes between observed axis neighbours."""
    pts = []
    sdf, w = volume.sdf, volume.weight
    for axis in range(3):
        a = [slice(None)] * 3
        b = [slice(None)] * 3
        a[axis] = slice(0, -1)
        b[axis] = slice(1, None)
        sa, sb = sdf[tuple(a)], sdf[tuple(b)]
        seen = (w[tuple(a)] > 0) & (w[tuple(b)] > 0)
        cross = seen & ((sa > 0) != (sb > 0)) & (sa != sb)
        idx = np.argwhere(cross)
        if len(idx) == 0:
            continue
        fa, fb = sa[cross], sb[cross]
        frac = fa / (fa - fb)
        p = volume.origin + idx * volume.voxel_size
        p[:, axis] += frac * volume.voxel_size
        pts.append(p)
    return PointCloud(np.concatenate(pts) if pts else np.zeros((0, 3)))


def fuse(depths: list[DepthMap], K: np.ndarray, poses: np.ndarray, voxel_size: float | None = None,
         truncation_voxels: float = 4.0, resolution: int = 128) -> tuple[PointCloud, TsdfVolume]:
    """Integrate every frame and extract the surface cloud."""
    raw = PointCloud.concat([unproject_frame(d, K, P) for d, P in zip(depths, poses)])
    vol = TsdfVolume.around(raw.points, voxel_size, truncation_voxels, resolution)
    for d, P in zip(depths, poses):
        tsdf_integrate(vol, d, K, P)
    return extract_surface_cloud(vol), vol


# -- exports -------------------------------------------------------------------

def export_ply(cloud: PointCloud, path) -> None:
    """Binary little-endian PLY with float32 xyz and optional uchar rgb."""
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(cloud)}",
              "property float x", "property float y", "property float z"]
    if cloud.colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    data = np.zeros(len(cloud), dtype=fields)
    data["x"], data["y"], data["z"] = cloud.points.T.astype(np.float32)
    if cloud.colors is not None:
        rgb = np.clip(np.rint(cloud.colors * 255), 0, 255).astype(np.uint8)
        data["red"], data["green"], data["blue"] = rgb.T
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())


def read_ply(path) -> PointCloud:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise ValueError(f"{path} is not a PLY file")
        count, props = 0, []
        fmt = None
        while True:
            line = fh.readline()
            if not line:
                raise ValueError(f"{path}: truncated header")
            tok = line.decode("ascii").split()
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[:2] == ["element", "vertex"]:
                count = int(tok[2])
            elif tok[0] == "property":
                props.append((tok[2], {"float": "<f4", "uchar": "u1", "double": "<f8"}[tok[1]]))
            elif tok[0] == "end_header":
                break
        if fmt != "binary_little_endian":
            raise ValueError(f"{path}: only binary_little_endian PLY is supported")
        data = np.frombuffer(fh.read(), dtype=props, count=count)
    pts = np.stack([data["x"], data["y"], data["z"]], 1).astype(np.float64)
    names = [p[0] for p in props]
    colors = None
    if "red" in names:
        colors = np.stack([data["red"], data["green"], data["blue"]], 1) / 255.0
    return PointCloud(pts, colors)


@dataclass
class Trajectory:
    """Per-frame index, translation and unit quaternion ``(qx, qy, qz, qw)``."""

    indices: np.ndarray
    translations: np.ndarray
    quaternions: np.ndarray

    @classmethod
    def from_poses(cls, poses: np.ndarray, indices=None) -> "Trajectory":
        poses = np.asarray(poses, float)
        idx = np.arange(len(poses)) if indices is None else np.asarray(indices)
        q = Rotation.from_matrix(poses[:, :3, :3]).as_quat()
        # canonical sign keeps identity at (0, 0, 0, 1)
        q = np.where(q[:, 3:4] < 0, -q, q)
        return cls(idx, poses[:, :3, 3].copy(), q)

    def poses(self) -> np.ndarray:
        out = np.tile(np.eye(4), (len(self.indices), 1, 1))
        out[:, :3, :3] = Rotation.from_quat(self.quaternions).as_matrix()
        out[:, :3, 3] = self.translations
        return out

    def subset(self, indices) -> "Trajectory":
        pos = {int(k): n for n, k in enumerate(self.indices)}
        sel = [pos[int(k)] for k in indices]
        return Trajectory(self.indices[sel], self.translations[sel], self.quaternions[sel])


def _fmt(x: float) -> str:
    s = f"{x:.9g}"
    return "0" if s == "-0" else s


def export_trajectory(traj: Trajectory, path) -> None:
    lines = []
    for i, t, q in zip(traj.indices, traj.translations, traj.quaternions):
        lines.append(" ".join([str(int(i))] + [_fmt(x) for x in (*t, *q)]))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_trajectory(path) -> Trajectory:
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        rows.append([float(x) for x in line.split()])
    arr = np.asarray(rows, dtype=np.float64).reshape(-1, 8)
    return Trajectory(arr[:, 0].astype(np.int64), arr[:, 1:4], arr[:, 4:8])


def interpolate_poses(poses: np.ndarray, indices, total: int) -> np.ndarray:
    """Fill poses for every frame in ``range(total)`` from optimised keyframes.

    Translation and intrinsic XYZ Euler angles are interpolated linearly
    between neighbouring keyframes; frames outside the keyframe span copy
    the nearest end.
    """
    indices = np.asarray(indices, dtype=float)
    eul = rotation_to_euler(np.asarray(poses)[:, :3, :3])
    eul = np.unwrap(eul, axis=0)
    trans = np.asarray(poses)[:, :3, 3]
    frames = np.arange(total, dtype=float)
    e = np.stack([np.interp(frames, indices, eul[:, k]) for k in range(3)], 1)
    t = np.stack([np.interp(frames, indices, trans[:, k]) for k in range(3)], 1)
    out = np.tile(np.eye(4), (total, 1, 1))
    out[:, :3, :3] = euler_to_rotation(e)
    out[:, :3, 3] = t
    return out
