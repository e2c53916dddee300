"""Render the default synthetic benchmark, reconstruct it and print the metrics.

Runs the free-pose reconstruction and, unless ``--skip-frozen`` is given, a
second run with ground-truth poses frozen, then prints both metric sets side
by side with wall-clock times.

Example::

    python scripts/run_synthetic_benchmark.py --workdir /tmp/bench
"""

import argparse
import json
import logging
import time
from pathlib import Path

from monorecon import cli
from monorecon.synth import CorruptionSpec, SceneSpec

logger = logging.getLogger("benchmark")


def reconstruct(data: Path, out: Path, scale: float, extra: list[str]) -> tuple[dict, float]:
    start = time.perf_counter()
    code = cli.main(["reconstruct", "-i", str(data), "-o", str(out), "--schedule-scale", str(scale), *extra])
    seconds = time.perf_counter() - start
    if code != 0:
        raise SystemExit(f"reconstruct {extra} failed with exit status {code}")
    return json.loads((out / "metrics.json").read_text()), seconds


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--workdir", type=Path, default=Path("benchmark_run"))
    parser.add_argument("--schedule-scale", type=float, default=1.0)
    parser.add_argument("--corruption-seed", type=int, default=0)
    parser.add_argument("--skip-frozen", action="store_true", help="only run the free-pose reconstruction")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")

    data = args.workdir / "data"
    logger.info("rendering the default scene into %s", data)
    cli.cmd_synth(data, SceneSpec.default(), CorruptionSpec(seed=args.corruption_seed))

    runs = {"free": reconstruct(data, args.workdir / "free", args.schedule_scale, [])}
    if not args.skip_frozen:
        runs["gt poses"] = reconstruct(data, args.workdir / "frozen", args.schedule_scale, ["--freeze-poses"])

    names = list(runs)
    print(f"{'metric':<12}" + "".join(f"{n:>14}" for n in names))
    for key in sorted(runs[names[0]][0]):
        print(f"{key:<12}" + "".join(f"{runs[n][0][key]:>14.5f}" for n in names))
    print(f"{'seconds':<12}" + "".join(f"{runs[n][1]:>14.1f}" for n in names))


if __name__ == "__main__":
    main()
