"""Experiment runner and ablation sweeps.

A run directory holds ``config.json`` (the resolved config, enough to
reproduce the run), ``losses.csv``, ``eval.json`` and ``checkpoint/``.
"""
from __future__ import annotations

import copy
import csv
import dataclasses
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import tensor as T
from .data import CLASS_NAMES, SceneSpec, generate_set, load_folder
from .metrics import ConfusionMatrix
from .rebuilder import Rebuilder, RebuilderConfig
from .segmodel import SegModelConfig, build_segmodel
from .uda import ObjectiveKind, TrainConfig, Trainer

log = logging.getLogger(__name__)

LOSS_COLUMNS = ["step", "l_sup", "l_uda", "l_mfm", "l_overall", "q"]
SWEEP_AXES = {
    "mask_ratio": ("rebuilder", "mask_ratio"),
    "lambda": ("train", "lam"),
    "num_blocks": ("rebuilder", "num_blocks"),
    "embed_dim": ("rebuilder", "embed_dim"),
    "grid": ("rebuilder", "grid"),
    "objective": ("train", "objective"),
}
AXIS_ALIASES = {"λ": "lambda", "lam": "lambda", "rho": "mask_ratio"}


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    n_source: int = 400
    n_target: int = 400
    n_eval: int = 200
    data_seed: int = 0
    batch_size: int = 4
    source_folder: str | None = None
    target_folder: str | None = None
    eval_folder: str | None = None


@dataclass
class ExperimentConfig:
    model: SegModelConfig = field(default_factory=SegModelConfig)
    rebuilder: RebuilderConfig = field(default_factory=RebuilderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    eval_interval: int = 500
    out_dir: str = "runs/default"
    threads: int = 1

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        d = copy.deepcopy(d)
        try:
            data = d.pop("data", {})
            scene = data.pop("scene", {})
            out = cls(
                model=SegModelConfig(**d.pop("model", {})),
                rebuilder=RebuilderConfig(**d.pop("rebuilder", {})),
                train=TrainConfig(**d.pop("train", {})),
                data=DataConfig(scene=SceneSpec(**scene), **data),
                **d,
            )
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid config: {e}") from None
        out.validate()
        return out

    @classmethod
    def load(cls, path):
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        return cls.from_dict(d)

    def validate(self):
        try:
            self.rebuilder.validate()
            ObjectiveKind(self.train.objective)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.model.kind not in ("single", "multi"):
            raise ConfigError(f"unknown model kind {self.model.kind!r}")
        if self.rebuilder.projector != self.model.kind:
            raise ConfigError(f"projector {self.rebuilder.projector!r} does not fit model {self.model.kind!r}")
        if self.train.steps < 0 or self.data.batch_size <= 0:
            raise ConfigError("steps must be >= 0 and batch_size > 0")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if not 0 < self.train.tau < 1 or not 0 <= self.train.alpha <= 1:
            raise ConfigError("tau must lie in (0, 1) and alpha in [0, 1]")
        stride = 8 if self.model.kind == "single" else 32
        if self.data.scene.size % stride:
            raise ConfigError(f"image size {self.data.scene.size} must be divisible by {stride}")
        if self.data.source_folder is None and self.model.num_classes != self.data.scene.num_classes:
            raise ConfigError("model num_classes must match the synthetic scene classes")


def with_value(cfg: ExperimentConfig, axis, value):
    axis = AXIS_ALIASES.get(axis, axis)
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_AXES)}")
    section, name = SWEEP_AXES[axis]
    out = copy.deepcopy(cfg)
    sub = getattr(out, section)
    kind = type(getattr(sub, name))
    setattr(sub, name, value if axis == "objective" else kind(value))
    if axis == "objective" and ObjectiveKind(value) is ObjectiveKind.NONE:
        out.train.lam = 0.0
    out.validate()
    return out


# ----------------------------------------------------------------------------
# data


def _folder_arrays(path, num_classes):
    ds = load_folder(path, num_classes)
    pairs = list(ds)
    if not pairs:
        raise ConfigError(f"no image/label pairs under {path}")
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


def build_data(dc: DataConfig, num_classes):
    """Tensors for source train, target train (labels unused) and target eval."""
    if dc.source_folder:
        xs, ys = _folder_arrays(dc.source_folder, num_classes)
        xt, _ = _folder_arrays(dc.target_folder or dc.source_folder, num_classes)
        xe, ye = _folder_arrays(dc.eval_folder or dc.target_folder or dc.source_folder, num_classes)
    else:
        base = dc.data_seed * 1_000_000
        xs, ys = generate_set(range(base, base + dc.n_source), dc.scene, "source")
        xt, _ = generate_set(range(base + 300_000, base + 300_000 + dc.n_target), dc.scene, "target")
        xe, ye = generate_set(range(base + 600_000, base + 600_000 + dc.n_eval), dc.scene, "target")
    t = torch.from_numpy
    return {"xs": t(xs), "ys": t(ys).long(), "xt": t(xt), "xe": t(xe), "ye": t(ye).long()}


@torch.no_grad()
def evaluate(model, images, labels, num_classes, batch=50):
    model.eval()
    conf = ConfusionMatrix(num_classes)
    for i in range(0, len(images), batch):
        pred = model(images[i:i + batch]).argmax(dim=1)
        conf.accumulate(pred.numpy(), labels[i:i + batch].numpy())
    model.train()
    return conf


# ----------------------------------------------------------------------------
# runs


def build_models(cfg: ExperimentConfig, seed):
    torch.manual_seed(seed)
    model = build_segmodel(cfg.model)
    size = cfg.data.scene.size
    rebuilder = None
    if ObjectiveKind(cfg.train.objective) is not ObjectiveKind.NONE:
        rebuilder = Rebuilder(cfg.rebuilder, model.feature_shape((size, size)), image_size=(size, size))
    return model, rebuilder


def state_tensors(model, rebuilder=None):
    tensors = dict(model.state_dict())
    if rebuilder is not None:
        tensors.update({f"rebuilder.{k}": v for k, v in rebuilder.state_dict().items()})
    return tensors


def load_inference_model(cfg: ExperimentConfig, checkpoint):
    """Segmentation model from a checkpoint; rebuilder.* entries are ignored."""
    model = build_segmodel(cfg.model)
    tensors = {k: v for k, v in T.load_checkpoint(checkpoint).items() if not k.startswith("rebuilder.")}
    model.load_state_dict(tensors, strict=True)
    model.eval()
    return model


def _class_names(cfg):
    n = cfg.model.num_classes
    return list(CLASS_NAMES) if n == len(CLASS_NAMES) else [str(i) for i in range(n)]


def _fmt(v):
    return repr(float(v))


def train_single(cfg: ExperimentConfig, seed, run_dir, data=None):
    """One seed. Writes the run directory and returns its eval dict."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    resolved = copy.deepcopy(cfg)
    resolved.seeds = [seed]
    resolved.out_dir = str(run_dir)
    (run_dir / "config.json").write_text(resolved.to_json())

    torch.set_num_threads(cfg.threads)
    data = data or build_data(cfg.data, cfg.model.num_classes)
    model, rebuilder = build_models(cfg, seed)
    trainer = Trainer(model, rebuilder, cfg.train, seed=seed)
    batch_rng = np.random.default_rng([seed, 3])
    names = _class_names(cfg)
    no_aux = ObjectiveKind(cfg.train.objective) is ObjectiveKind.NONE

    history = []
    status, error = "ok", None
    with open(run_dir / "losses.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOSS_COLUMNS)
        try:
            for step in range(cfg.train.steps):
                si = batch_rng.integers(0, len(data["xs"]), cfg.data.batch_size)
                ti = batch_rng.integers(0, len(data["xt"]), cfg.data.batch_size)
                r = trainer.train_step(data["xs"][si], data["ys"][si], data["xt"][ti])
                writer.writerow([step, _fmt(r.l_sup), _fmt(r.l_uda), "" if no_aux else _fmt(r.l_mfm),
                                 _fmt(r.l_overall), _fmt(r.q)])
                if cfg.eval_interval and (step + 1) % cfg.eval_interval == 0 and step + 1 < cfg.train.steps:
                    _, m = evaluate(model, data["xe"], data["ye"], cfg.model.num_classes).miou()
                    history.append({"step": step + 1, "miou": m})
                    log.info("seed %d step %d target mIoU %.4f", seed, step + 1, m)
        except T.NumericalError as e:
            status, error = "failed", str(e)
            log.error("seed %d: %s", seed, e)

    report = {"seed": seed, "status": status, "error": error, "steps": trainer.step_count}
    if status == "ok":
        conf = evaluate(model, data["xe"], data["ye"], cfg.model.num_classes)
        report.update(conf.report(names))
        report["confusion"] = conf.counts.tolist()
        history.append({"step": trainer.step_count, "miou": report["miou"]})
        T.save_checkpoint(run_dir / "checkpoint", state_tensors(model, rebuilder))
    report["history"] = history
    (run_dir / "eval.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return report


def run_experiment(cfg: ExperimentConfig, out_dir=None):
    """Train every seed; returns the summary written to ``report.json``."""
    cfg.validate()
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    data = build_data(cfg.data, cfg.model.num_classes)
    runs = [train_single(cfg, s, out / f"seed_{s}", data) for s in cfg.seeds]
    ok = [r["miou"] for r in runs if r["status"] == "ok"]
    summary = {
        "runs": [{k: r.get(k) for k in ("seed", "status", "error", "miou")} for r in runs],
        "mean_miou": float(np.mean(ok)) if ok else None,
        "failed": any(r["status"] != "ok" for r in runs),
    }
    (out / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def _value_label(v):
    return str(v).replace("/", "_")


def _sweep_cell(args):
    cfg_dict, seed, run_dir = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    try:
        r = train_single(cfg, seed, run_dir)
        return r["status"], r.get("miou")
    except Exception as e:  # a broken cell must not stop the sweep
        log.exception("sweep cell %s failed", run_dir)
        return f"failed: {e}", None


def run_sweep(cfg: ExperimentConfig, axis, values, out_dir=None, jobs=1):
    """One run per (value, seed); writes ``sweep.csv`` and returns its rows."""
    axis = AXIS_ALIASES.get(axis, axis)
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = []
    for v in values:
        vcfg = with_value(cfg, axis, v)
        for s in cfg.seeds:
            cells.append((v, s, (vcfg.to_dict(), s, str(out / f"{axis}={_value_label(v)}" / f"seed_{s}"))))
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_sweep_cell, [c[2] for c in cells]))
    else:
        results = [_sweep_cell(c[2]) for c in cells]

    by_value = {}
    for (v, _, _), (status, m) in zip(cells, results):
        if m is not None:
            by_value.setdefault(str(v), []).append(m)
    rows = []
    for (v, s, _), (status, m) in zip(cells, results):
        vals = by_value.get(str(v))
        rows.append({"axis": axis, "value": v, "seed": s, "status": status,
                     "final_miou": "" if m is None else m,
                     "mean_miou": "" if not vals else float(np.mean(vals))})
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["axis", "value", "seed", "status", "final_miou", "mean_miou"])
        writer.writeheader()
        writer.writerows(rows)
    return rows


def replace(cfg, **sections):
    """Copy of ``cfg`` with per-section field overrides, e.g. train={"lam": 0}."""
    out = copy.deepcopy(cfg)
    for section, fields in sections.items():
        if isinstance(fields, dict):
            setattr(out, section, dataclasses.replace(getattr(out, section), **fields))
        else:
            setattr(out, section, fields)
    out.validate()
    return out
