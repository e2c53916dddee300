"""Command-line entry point: ``reconstruct``, ``synth``, ``eval`` and ``gradcheck``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import platform
import sys
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path

import numpy as np
import torch

from . import gradcheck as gc
from .alignment import LwlrConfig
from .fusion import Trajectory, export_ply, export_trajectory, fuse, interpolate_poses, read_trajectory
from .geometry import DepthMap, InvalidArgument, Stage, init_focal
from .io import (
    DatasetError,
    SequenceBundle,
    frame_stem,
    load_sequence,
    read_pfm,
    stem_index,
    write_image,
    write_mask,
    write_pfm,
)
from .metrics import MetricsReport, fov, metric_cloud, metric_depth, metric_fov, metric_trajectory
from .optimizer import OptimConfig, optimize
from .sampler import SamplerConfig
from .synth import CorruptionSpec, SceneSpec, make_sequence

logger = logging.getLogger("monorecon")


@dataclass
class FusionConfig:
    voxel_size: float | None = None
    truncation_voxels: float = 4.0
    resolution: int = 128


@dataclass
class RunConfig:
    input: str = ""
    output: str = ""
    preset: str = "indoor"
    schedule_scale: float = 1.0
    seed: int = 0
    freeze_intrinsics: bool = False
    freeze_poses: bool = False
    export_dense_trajectory: bool = False
    downsample: bool = True
    optim: dict = field(default_factory=dict)
    sampler: dict = field(default_factory=dict)
    lwlr: dict = field(default_factory=dict)
    fusion: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.preset not in ("indoor", "outdoor"):
            raise InvalidArgument(f"preset must be 'indoor' or 'outdoor', got {self.preset!r}")
        if self.schedule_scale < 0:
            raise InvalidArgument("schedule scale must be non-negative")

    def optim_config(self) -> OptimConfig:
        return OptimConfig(preset=self.preset, schedule_scale=self.schedule_scale, **self.optim)

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(**{**self.sampler, "seed": self.seed})

    def lwlr_config(self) -> LwlrConfig:
        return LwlrConfig(**self.lwlr)

    def fusion_config(self) -> FusionConfig:
        return FusionConfig(**self.fusion)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """Hash of every setting that affects the numbers (paths excluded)."""
        d = self.to_dict()
        d.pop("input")
        d.pop("output")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def _versions() -> dict:
    out = {"python": platform.python_version()}
    for pkg in ("artifact", "numpy", "scipy", "torch", "opencv-python-headless", "Pillow"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def write_manifest(out: Path, cfg: RunConfig, command: str) -> None:
    manifest = {
        "command": command,
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "versions": _versions(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- evaluation ---------------------------------------------------------------

def gt_focal(bundle: SequenceBundle) -> float:
    """Ground-truth focal used for the intrinsics metric (mean of fx and fy)."""
    intr = bundle.gt.intrinsics
    return 0.5 * (float(intr["fx"]) + float(intr["fy"]))


def gt_K(bundle: SequenceBundle) -> np.ndarray:
    i = bundle.gt.intrinsics
    return np.array([[i["fx"], 0, i["cx"]], [0, i["fy"], i["cy"]], [0, 0, 1]], dtype=float)


def evaluate(bundle: SequenceBundle, selected, depths, poses, delta: float, f0: float,
             K: np.ndarray, fusion: FusionConfig) -> MetricsReport:
    """All metrics that the available ground truth supports; the rest are ``None``."""
    gt = bundle.gt
    W = bundle.size[0]
    values = dict.fromkeys(f.name for f in dataclasses.fields(MetricsReport))
    if gt.depths is not None:
        values["abs_rel"], values["delta1"] = metric_depth(
            [d.values * d.mask for d in depths], [gt.depths[i].values for i in selected])
    similarity = None
    if gt.poses is not None:
        ate, rpe_t, rpe_r, similarity = metric_trajectory(poses, gt.poses[selected])
        values.update(ate=ate, rpe_t=rpe_t, rpe_r_deg=rpe_r)
    if gt.intrinsics is not None:
        values["fov_abs_rel"] = metric_fov(delta, f0, gt_focal(bundle), W)
    if gt.depths is not None and gt.poses is not None and gt.intrinsics is not None:
        gt_cloud, gt_vol = fuse([gt.depths[i] for i in selected], gt_K(bundle), gt.poses[selected],
                                fusion.voxel_size, fusion.truncation_voxels, fusion.resolution)
        pred_cloud, _ = fuse(depths, K, poses, None, fusion.truncation_voxels, fusion.resolution)
        tau = 2.0 * gt_vol.voxel_size
        values["chamfer_l1"], values["f_score"] = metric_cloud(pred_cloud.points, gt_cloud.points,
                                                               tau, similarity)
    return MetricsReport(**values)


# -- commands -----------------------------------------------------------------

def cmd_reconstruct(cfg: RunConfig) -> int:
    bundle = load_sequence(cfg.input)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    W, H = bundle.size
    f0 = init_focal(W, H)
    fixed_poses = fixed_delta = None
    if cfg.freeze_poses:
        if bundle.gt.poses is None:
            raise DatasetError("--freeze-poses needs gt/poses.txt")
        fixed_poses = bundle.gt.poses
    if cfg.freeze_intrinsics:
        if bundle.gt.intrinsics is None:
            raise DatasetError("--freeze-intrinsics needs gt/intrinsics.json")
        fixed_delta = gt_focal(bundle) / f0

    torch.manual_seed(cfg.seed)
    res = optimize(bundle.images, bundle.depths, cfg.optim_config(), cfg.sampler_config(),
                   cfg.lwlr_config(), bundle.masks, fixed_poses, fixed_delta, cfg.downsample)
    sel = res.selected
    indices = [stem_index(bundle.stems[i], i) for i in sel]

    (out / "depth").mkdir(exist_ok=True)
    for i, d in zip(sel, res.depths):
        write_pfm(out / "depth" / f"{bundle.stems[i]}.pfm", d.values)
    if cfg.freeze_poses:
        # pass the ingested rotations through untouched
        traj = Trajectory(np.asarray(indices), bundle.gt.poses[sel][:, :3, 3], bundle.gt.quaternions[sel])
    else:
        traj = Trajectory.from_poses(res.poses, indices)
    export_trajectory(traj, out / "trajectory.txt")
    if cfg.export_dense_trajectory:
        all_idx = [stem_index(s, n) for n, s in enumerate(bundle.stems)]
        dense = interpolate_poses(res.poses, sel, len(bundle.stems))
        export_trajectory(Trajectory.from_poses(dense, all_idx), out / "trajectory_dense.txt")

    K = res.K
    _write_json(out / "intrinsics.json", {
        "delta": float(res.delta), "f0": float(res.f0), "fx": float(K[0, 0]), "fy": float(K[1, 1]),
        "cx": float(K[0, 2]), "cy": float(K[1, 2]), "fov": fov(W, res.delta * res.f0),
    })
    fcfg = cfg.fusion_config()
    cloud, _ = fuse(res.depths, K, res.poses, fcfg.voxel_size, fcfg.truncation_voxels, fcfg.resolution)
    export_ply(cloud, out / "cloud.ply")
    with open(out / "loss_trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "stage", "pc", "gc", "regu", "total"])
        for r in res.trace:
            w.writerow([r.iteration, r.stage, repr(r.pc), repr(r.gc), repr(r.regu), repr(r.total)])
    if bundle.has_gt:
        report = evaluate(bundle, sel, res.depths, res.poses, res.delta, res.f0, K, fcfg)
        (out / "metrics.json").write_text(report.to_json())
        logger.info("metrics: %s", report)
    write_manifest(out, cfg, "reconstruct")
    return 0


def load_outputs(out: Path, bundle: SequenceBundle):
    """Read back the artifacts of a previous ``reconstruct`` run."""
    traj = read_trajectory(out / "trajectory.txt")
    by_index = {stem_index(s, n): n for n, s in enumerate(bundle.stems)}
    sel = [by_index[int(i)] for i in traj.indices]
    depths = [DepthMap(read_pfm(out / "depth" / f"{bundle.stems[i]}.pfm"), Stage.SCALE_CONSISTENT) for i in sel]
    intr = json.loads((out / "intrinsics.json").read_text())
    K = np.array([[intr["fx"], 0, intr["cx"]], [0, intr["fy"], intr["cy"]], [0, 0, 1]], dtype=float)
    return sel, depths, traj.poses(), intr, K


def cmd_eval(cfg: RunConfig) -> int:
    bundle = load_sequence(cfg.input)
    if not bundle.has_gt:
        raise DatasetError(f"{cfg.input}: no ground truth to evaluate against")
    out = Path(cfg.output)
    sel, depths, poses, intr, K = load_outputs(out, bundle)
    report = evaluate(bundle, sel, depths, poses, intr["delta"], intr["f0"], K, cfg.fusion_config())
    (out / "metrics.json").write_text(report.to_json())
    print(report.to_json(), end="")
    return 0


def cmd_synth(out_dir, scene: SceneSpec | None = None, corruption: CorruptionSpec | None = None) -> int:
    """Render a synthetic dataset in the ``load_sequence`` layout."""
    scene = scene or SceneSpec.default()
    corruption = corruption or CorruptionSpec()
    seq = make_sequence(scene, corruption)
    out = Path(out_dir)
    for sub in ("rgb", "depth", "mask", "gt/depth"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for i in range(len(seq.images)):
        stem = frame_stem(i)
        write_image(out / "rgb" / f"{stem}.png", seq.images[i])
        write_pfm(out / "depth" / f"{stem}.pfm", seq.depths[i].values)
        write_mask(out / "mask" / f"{stem}.png", seq.gt_depths[i].mask)
        write_pfm(out / "gt" / "depth" / f"{stem}.pfm", seq.gt_depths[i].values)
    export_trajectory(Trajectory.from_poses(seq.poses), out / "gt" / "poses.txt")
    K = scene.intrinsics()
    _write_json(out / "gt" / "intrinsics.json",
                {"fx": float(K[0, 0]), "fy": float(K[1, 1]), "cx": float(K[0, 2]), "cy": float(K[1, 2])})
    _write_json(out / "gt" / "affine.json",
                {"alpha": seq.alphas.tolist(), "beta": seq.betas.tolist(),
                 "corruption": dataclasses.asdict(corruption)})
    (out / "gt" / "scene.json").write_text(scene.to_json())
    return 0


def cmd_gradcheck(cfg: gc.GradcheckConfig | None = None, grad_fn=None) -> int:
    report = gc.run_gradcheck(cfg, grad_fn or gc.compute_gradients)
    for line in report.lines():
        print(line)
    return 0 if report.passed else 1


# -- argument parsing -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="monorecon", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def run_flags(sp):
        sp.add_argument("--config", type=Path, help="JSON file with RunConfig fields")
        sp.add_argument("--input", "-i", help="dataset directory")
        sp.add_argument("--output", "-o", help="output directory")
        sp.add_argument("--preset", choices=["indoor", "outdoor"])
        sp.add_argument("--seed", type=int)
        sp.add_argument("--voxel-size", type=float)

    r = sub.add_parser("reconstruct", help="optimise depths, poses and focal, then fuse")
    run_flags(r)
    r.add_argument("--freeze-intrinsics", action="store_true", default=None)
    r.add_argument("--freeze-poses", action="store_true", default=None)
    r.add_argument("--schedule-scale", type=float)
    r.add_argument("--export-dense-trajectory", action="store_true", default=None)
    r.add_argument("--no-downsample", dest="downsample", action="store_false", default=None)

    e = sub.add_parser("eval", help="recompute metrics for an existing output directory")
    run_flags(e)

    s = sub.add_parser("synth", help="render a synthetic dataset")
    s.add_argument("--output", "-o", required=True)
    s.add_argument("--scene", type=Path, help="scene spec JSON")
    s.add_argument("--corruption", type=Path, help="corruption spec JSON")
    s.add_argument("--seed", type=int, help="corruption seed")
    s.add_argument("--identity", action="store_true", help="write uncorrupted depth")

    g = sub.add_parser("gradcheck", help="finite-difference check of the gradients")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--instances", type=int, default=10)
    return p


def run_config_from_args(args) -> RunConfig:
    base = json.loads(args.config.read_text()) if getattr(args, "config", None) else {}
    for key in ("input", "output", "preset", "seed", "schedule_scale", "freeze_intrinsics",
                "freeze_poses", "export_dense_trajectory", "downsample"):
        val = getattr(args, key, None)
        if val is not None:
            base[key] = val
    if getattr(args, "voxel_size", None) is not None:
        base.setdefault("fusion", {})["voxel_size"] = args.voxel_size
    cfg = RunConfig(**base)
    if not cfg.input or not Path(cfg.input).is_dir():
        raise DatasetError(f"input directory {cfg.input!r} does not exist")
    if not cfg.output:
        raise InvalidArgument("an output directory is required")
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(gc.GradcheckConfig(instances=args.instances, seed=args.seed))
        if args.command == "synth":
            scene = SceneSpec.from_dict(json.loads(args.scene.read_text())) if args.scene else None
            if args.identity:
                corr = CorruptionSpec.identity()
            elif args.corruption:
                corr = CorruptionSpec(**json.loads(args.corruption.read_text()))
            else:
                corr = CorruptionSpec()
            if args.seed is not None:
                corr.seed = args.seed
            return cmd_synth(args.output, scene, corr)
        cfg = run_config_from_args(args)
        if args.command == "reconstruct":
            return cmd_reconstruct(cfg)
        return cmd_eval(cfg)
    except (ValueError, OSError, FloatingPointError, RuntimeError) as err:
        logger.error("%s", err)
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
