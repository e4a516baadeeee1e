"""Baseline vs MFM vs masking-only on the synthetic benchmark, 3 seeds each.

    python scripts/trend.py --config scripts/configs/trend.json --out runs/trend
"""
import argparse
import json
from pathlib import Path

import numpy as np

from mfm.harness import ExperimentConfig, build_data, replace, train_single

ARMS = {
    "source_only": {"train": {"uda": False, "objective": "none", "lam": 0.0}},
    "baseline": {"train": {"objective": "none", "lam": 0.0}},
    "mfm": {"train": {"objective": "pixel_cls", "lam": 1.0}},
    "masking_only": {"train": {"objective": "masking_only", "lam": 1.0}},
}


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--config", default=str(Path(__file__).parent / "configs" / "trend.json"))
    p.add_argument("--out", default="runs/trend")
    p.add_argument("--arms", default="baseline,mfm,masking_only")
    args = p.parse_args()

    base = ExperimentConfig.load(args.config)
    data = build_data(base.data, base.model.num_classes)
    summary = {}
    for arm in args.arms.split(","):
        cfg = replace(base, **ARMS[arm])
        scores = [100 * train_single(cfg, s, Path(args.out) / f"{arm}_{s}", data)["miou"] for s in base.seeds]
        summary[arm] = {"mean": float(np.mean(scores)), "per_seed": scores}
        print(f"{arm:14s} {np.mean(scores):6.2f}  " + " ".join(f"{v:6.2f}" for v in scores), flush=True)
    if "baseline" in summary:
        for arm, s in summary.items():
            if arm != "baseline":
                print(f"{arm} - baseline: {s['mean'] - summary['baseline']['mean']:+.2f}")
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "trend.json").write_text(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
