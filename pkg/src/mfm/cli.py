"""Command line entry point: ``mfm {run,sweep,eval,gradcheck,datagen}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import tensor as T
from .data import write_dataset
from .harness import (ConfigError, ExperimentConfig, build_data, evaluate, load_inference_model,
                      run_experiment, run_sweep, _class_names)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("mfm")


def _load(args):
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seeds = [args.seed]
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    cfg.validate()
    return cfg


def _parse_values(text):
    out = []
    for item in text.split(","):
        item = item.strip()
        try:
            out.append(json.loads(item))
        except json.JSONDecodeError:
            out.append(item)
    return out


def cmd_run(args):
    cfg = _load(args)
    summary = run_experiment(cfg)
    print(json.dumps(summary, indent=2))
    return EXIT_NUMERIC if summary["failed"] else EXIT_OK


def cmd_sweep(args):
    cfg = _load(args)
    rows = run_sweep(cfg, args.axis, _parse_values(args.values), jobs=args.jobs)
    for r in rows:
        print(f"{r['axis']}={r['value']} seed={r['seed']} {r['status']} miou={r['final_miou']}")
    return EXIT_NUMERIC if any(r["status"] != "ok" for r in rows) else EXIT_OK


def cmd_eval(args):
    cfg = _load(args)
    model = load_inference_model(cfg, args.checkpoint)
    data = build_data(cfg.data, cfg.model.num_classes)
    report = evaluate(model, data["xe"], data["ye"], cfg.model.num_classes).report(_class_names(cfg))
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    print(text)
    return EXIT_OK


def cmd_gradcheck(args):
    worst = {}
    for op in T.PrimitiveId:
        errs = []
        for case in range(args.cases):
            inputs, attrs = T.random_case(op, args.seed + case)
            errs.append(T.gradcheck(op, inputs, attrs=attrs, seed=args.seed + case))
        worst[op.value] = max(errs)
        print(f"{op.value:28s} max rel err {worst[op.value]:.2e} {'ok' if worst[op.value] <= args.tol else 'FAIL'}")
    return EXIT_OK if max(worst.values()) <= args.tol else EXIT_NUMERIC


def cmd_datagen(args):
    cfg = _load(args)
    dc = cfg.data
    base = dc.data_seed * 1_000_000
    splits = {
        "train": ("source", range(base, base + dc.n_source)),
        "adapt": ("target", range(base + 300_000, base + 300_000 + dc.n_target)),
        "val": ("target", range(base + 600_000, base + 600_000 + dc.n_eval)),
    }
    manifest = write_dataset(args.out or cfg.out_dir, dc.scene, splits)
    print(f"wrote {len(manifest['pairs'])} pairs to {args.out or cfg.out_dir}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="mfm", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--seed", type=int, help="run only this seed")
        if out:
            sp.add_argument("--out", help="output directory")

    sp = sub.add_parser("run", help="train and evaluate every seed")
    common(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="ablation sweep along one axis")
    common(sp)
    sp.add_argument("--axis", required=True)
    sp.add_argument("--values", required=True, help="comma separated, e.g. 0,0.2,0.4")
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on the target set")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="central-difference check of every primitive")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--cases", type=int, default=10)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("datagen", help="write synthetic PNG pairs and manifest.json")
    common(sp)
    sp.set_defaults(func=cmd_datagen)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"invalid config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except T.NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
