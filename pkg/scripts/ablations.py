"""Ablation sweeps over the Rebuilder and loss axes.

Each axis runs every value for every seed in the config and writes
``<out>/<axis>/sweep.csv``. Pick axes with ``--axes``.

    python scripts/ablations.py --axes mask_ratio,objective --out runs/ablations
"""
import argparse
from pathlib import Path

from mfm.harness import ExperimentConfig, run_sweep

GRID = {
    "mask_ratio": [0.0, 0.2, 0.4, 0.6, 0.8],
    "lambda": [0.0, 0.5, 1.0, 2.0],
    "num_blocks": [1, 2, 4],
    "embed_dim": [64, 128, 256],
    "grid": [4, 8, 16],
    "objective": ["none", "masking_only", "pixel_rec_norm", "feat_rec_teacher", "feat_rec_self", "pixel_cls"],
}


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--config", default=str(Path(__file__).parent / "configs" / "trend.json"))
    p.add_argument("--axes", default=",".join(GRID))
    p.add_argument("--out", default="runs/ablations")
    p.add_argument("--jobs", type=int, default=1)
    args = p.parse_args()

    cfg = ExperimentConfig.load(args.config)
    for axis in args.axes.split(","):
        rows = run_sweep(cfg, axis, GRID[axis], out_dir=Path(args.out) / axis, jobs=args.jobs)
        print(f"== {axis}")
        seen = set()
        for r in rows:
            if r["value"] not in seen:
                seen.add(r["value"])
                mean = float(r["mean_miou"]) if r["mean_miou"] != "" else float("nan")
                print(f"  {r['value']!s:18s} mean mIoU {100 * mean:6.2f}")


if __name__ == "__main__":
    main()
