"""Dataset directory layout: PFM depth, PNG frames and masks, GT sidecars.

Layout::

    rgb/NNNN.png            colour frames (png or ppm)
    depth/NNNN.pfm          affine-invariant depth, one per frame
    mask/NNNN.png           optional; nonzero marks usable pixels
    gt/poses.txt            optional camera-to-world trajectory
    gt/intrinsics.json      optional {fx, fy, cx, cy}
    gt/depth/NNNN.pfm       optional metric depth
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .fusion import read_trajectory
from .geometry import DepthMap, Stage

IMAGE_SUFFIXES = (".png", ".ppm")


class DatasetError(ValueError):
    """Raised for malformed or inconsistent dataset directories."""


def write_pfm(path, values: np.ndarray) -> None:
    """Single-channel little-endian PFM, rows stored bottom to top."""
    arr = np.asarray(values, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError(f"PFM expects a 2-D array, got shape {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        tag = fh.readline().strip()
        if tag not in (b"Pf", b"PF"):
            raise DatasetError(f"{path}: not a PFM file")
        if tag == b"PF":
            raise DatasetError(f"{path}: colour PFM is not a depth map")
        dims = fh.readline().split()
        scale = float(fh.readline().strip())
        w, h = int(dims[0]), int(dims[1])
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(), dtype=dtype)
    if data.size != w * h:
        raise DatasetError(f"{path}: expected {w * h} samples, found {data.size}")
    return data.reshape(h, w)[::-1].astype(np.float64)


def write_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 0


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path)


def _stems(directory: Path, suffixes) -> dict[str, Path]:
    return {p.stem: p for p in sorted(directory.iterdir()) if p.suffix.lower() in suffixes}


@dataclass
class GroundTruth:
    poses: np.ndarray | None = None
    quaternions: np.ndarray | None = None
    intrinsics: dict | None = None
    depths: list[DepthMap] | None = None

    @property
    def available(self) -> bool:
        return self.poses is not None or self.depths is not None or self.intrinsics is not None


@dataclass
class SequenceBundle:
    stems: list[str]
    images: np.ndarray
    depths: list[DepthMap]
    masks: np.ndarray | None = None
    gt: GroundTruth = field(default_factory=GroundTruth)

    @property
    def size(self) -> tuple[int, int]:
        return self.images.shape[2], self.images.shape[1]

    @property
    def has_gt(self) -> bool:
        return self.gt.available


def load_sequence(directory) -> SequenceBundle:
    """Read a dataset directory; frames are sorted by file stem."""
    root = Path(directory)
    rgb_dir, depth_dir = root / "rgb", root / "depth"
    if not rgb_dir.is_dir():
        raise DatasetError(f"{root}: missing rgb/ directory")
    frames = _stems(rgb_dir, IMAGE_SUFFIXES)
    if not frames:
        raise DatasetError(f"{rgb_dir}: no frames found")
    depth_files = _stems(depth_dir, (".pfm",)) if depth_dir.is_dir() else {}
    stems = sorted(frames)
    missing = [s for s in stems if s not in depth_files]
    if missing:
        raise DatasetError(f"missing depth for frame {missing[0]!r}")

    images = [read_image(frames[s]) for s in stems]
    shape = images[0].shape
    for s, im in zip(stems, images):
        if im.shape != shape:
            raise DatasetError(f"frame {s!r} has resolution {im.shape[:2]}, expected {shape[:2]}")
    depths = []
    for s in stems:
        d = read_pfm(depth_files[s])
        if d.shape != shape[:2]:
            raise DatasetError(f"depth {s!r} has resolution {d.shape}, expected {shape[:2]}")
        depths.append(DepthMap(d, Stage.AFFINE_INVARIANT))

    masks = None
    mask_dir = root / "mask"
    if mask_dir.is_dir():
        mask_files = _stems(mask_dir, (".png",))
        masks = np.stack([read_mask(mask_files[s]) if s in mask_files else np.ones(shape[:2], bool)
                          for s in stems])

    return SequenceBundle(stems, np.stack(images), depths, masks, _load_gt(root / "gt", stems, shape[:2]))


def _load_gt(gt_dir: Path, stems: list[str], hw) -> GroundTruth:
    gt = GroundTruth()
    if not gt_dir.is_dir():
        return gt
    if (gt_dir / "poses.txt").exists():
        traj = read_trajectory(gt_dir / "poses.txt")
        if len(traj.indices) != len(stems):
            raise DatasetError(f"gt/poses.txt has {len(traj.indices)} poses for {len(stems)} frames")
        gt.poses = traj.poses()
        gt.quaternions = traj.quaternions
    if (gt_dir / "intrinsics.json").exists():
        gt.intrinsics = json.loads((gt_dir / "intrinsics.json").read_text())
    if (gt_dir / "depth").is_dir():
        files = _stems(gt_dir / "depth", (".pfm",))
        if all(s in files for s in stems):
            gt.depths = []
            for s in stems:
                d = read_pfm(files[s])
                if d.shape != tuple(hw):
                    raise DatasetError(f"gt depth {s!r} has resolution {d.shape}")
                gt.depths.append(DepthMap(d, Stage.SCALE_CONSISTENT))
    return gt


def frame_stem(index: int) -> str:
    return f"{index:04d}"


def stem_index(stem: str, fallback: int) -> int:
    """Numeric frame index encoded in a stem, or ``fallback``."""
    m = re.search(r"(\d+)$", stem)
    return int(m.group(1)) if m else fallback
