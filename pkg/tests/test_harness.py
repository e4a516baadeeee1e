import csv
import json

import pytest

from mfm import cli
from mfm.harness import ConfigError, ExperimentConfig, replace, run_experiment, run_sweep, with_value


def tiny_config(tmp_path, **train):
    cfg = ExperimentConfig(out_dir=str(tmp_path / "run"), seeds=[0], eval_interval=2)
    cfg = replace(cfg,
                  model={"width": 8},
                  rebuilder={"embed_dim": 16, "grid": 4, "num_heads": 2, "num_blocks": 1},
                  train=dict({"steps": 3, "tau": 0.5}, **train),
                  data={"n_source": 6, "n_target": 6, "n_eval": 4, "batch_size": 2})
    cfg.data.scene.size = 32
    return cfg


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_config_roundtrip(tmp_path):
    cfg = tiny_config(tmp_path)
    again = ExperimentConfig.from_dict(json.loads(cfg.to_json()))
    assert again.to_json() == cfg.to_json()
    default = ExperimentConfig()
    assert default.train.lam == 1.0 and default.rebuilder.mask_ratio == 0.4
    assert default.rebuilder.num_blocks == 2 and default.train.rebuilder_lr == 6e-5
    assert default.seeds == [0, 1, 2]


@pytest.mark.parametrize("bad", [
    {"train": {"objective": "contrastive"}},
    {"rebuilder": {"mask_ratio": 2}},
    {"model": {"kind": "multi"}},
    {"unknown_field": 1},
])
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(bad)


def test_run_writes_artifacts(tmp_path):
    cfg = tiny_config(tmp_path)
    summary = run_experiment(cfg)
    run = tmp_path / "run" / "seed_0"
    assert not summary["failed"]
    for name in ("config.json", "losses.csv", "eval.json", "checkpoint/manifest.json"):
        assert (run / name).exists(), name
    rows = read_csv(run / "losses.csv")
    assert [r["step"] for r in rows] == ["0", "1", "2"]
    assert list(rows[0]) == ["step", "l_sup", "l_uda", "l_mfm", "l_overall", "q"]
    ev = json.loads((run / "eval.json").read_text())
    assert set(ev["per_class_iou"]) == {"background", "circle", "rectangle", "triangle"}
    assert [h["step"] for h in ev["history"]] == [2, 3]
    names = json.loads((run / "checkpoint/manifest.json").read_text())["tensors"]
    assert any(k.startswith("rebuilder.") for k in names)
    assert all(k.split(".")[0] in ("encoder", "decoder", "rebuilder") for k in names)


def test_zero_steps_still_reports(tmp_path):
    cfg = tiny_config(tmp_path, steps=0)
    run_experiment(cfg)
    ev = json.loads((tmp_path / "run" / "seed_0" / "eval.json").read_text())
    assert ev["steps"] == 0 and 0.0 <= ev["miou"] <= 1.0


def test_resolved_config_reproduces(tmp_path):
    cfg = tiny_config(tmp_path)
    run_experiment(cfg)
    first = tmp_path / "run" / "seed_0"
    again = ExperimentConfig.load(first / "config.json")
    assert again.seeds == [0]
    run_experiment(again, out_dir=tmp_path / "again")
    second = tmp_path / "again" / "seed_0"
    assert (first / "losses.csv").read_bytes() == (second / "losses.csv").read_bytes()
    assert (first / "eval.json").read_bytes() == (second / "eval.json").read_bytes()


def test_none_objective_leaves_mfm_column_empty(tmp_path):
    base = tiny_config(tmp_path)
    run_experiment(with_value(base, "objective", "none"), out_dir=tmp_path / "none")
    run_experiment(base, out_dir=tmp_path / "mfm")
    none = read_csv(tmp_path / "none" / "seed_0" / "losses.csv")
    mfm = read_csv(tmp_path / "mfm" / "seed_0" / "losses.csv")
    assert all(r["l_mfm"] == "" for r in none)
    assert all(r["l_mfm"] != "" for r in mfm)
    # identical data, init and batches: first-step supervised loss agrees
    assert none[0]["l_sup"] == mfm[0]["l_sup"]


def test_sweep_rows(tmp_path):
    cfg = tiny_config(tmp_path)
    cfg.seeds = [0, 1]
    rows = run_sweep(cfg, "mask_ratio", [0.0, 0.4], out_dir=tmp_path / "sweep")
    assert len(rows) == 4
    on_disk = read_csv(tmp_path / "sweep" / "sweep.csv")
    assert len(on_disk) == 4 and {r["value"] for r in on_disk} == {"0.0", "0.4"}
    for v in ("0.0", "0.4"):
        cell = [r for r in on_disk if r["value"] == v]
        mean = sum(float(r["final_miou"]) for r in cell) / 2
        assert float(cell[0]["mean_miou"]) == pytest.approx(mean)


def test_sweep_single_value(tmp_path):
    rows = run_sweep(tiny_config(tmp_path), "lambda", [0.4], out_dir=tmp_path / "s")
    assert len(rows) == 1 and rows[0]["status"] == "ok"


def test_sweep_records_failures(tmp_path):
    cfg = tiny_config(tmp_path)
    cfg.train.lr = 1e30  # blows up within a couple of steps
    rows = run_sweep(cfg, "lambda", [1.0, 2.0], out_dir=tmp_path / "s")
    assert len(rows) == 2
    assert all(r["status"] != "ok" for r in rows)


def test_unknown_axis(tmp_path):
    with pytest.raises(ConfigError, match="axis"):
        run_sweep(tiny_config(tmp_path), "depth", [1])


def _write_cfg(tmp_path, cfg):
    path = tmp_path / "cfg.json"
    path.write_text(cfg.to_json())
    return str(path)


def test_cli_run_and_eval(tmp_path, capsys):
    path = _write_cfg(tmp_path, tiny_config(tmp_path))
    assert cli.main(["run", "--config", path, "--seed", "0", "--out", str(tmp_path / "cli")]) == 0
    ckpt = tmp_path / "cli" / "seed_0" / "checkpoint"
    assert cli.main(["eval", "--config", path, "--checkpoint", str(ckpt), "--out", str(tmp_path / "e.json")]) == 0
    report = json.loads((tmp_path / "e.json").read_text())
    stored = json.loads((tmp_path / "cli" / "seed_0" / "eval.json").read_text())
    assert report["miou"] == stored["miou"]


def test_cli_exit_codes(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"rebuilder": {"mask_ratio": -1}}))
    assert cli.main(["run", "--config", str(bad)]) == 2
    assert cli.main(["run", "--config", str(tmp_path / "missing.json")]) == 2
    cfg = tiny_config(tmp_path)
    cfg.train.lr = 1e30
    assert cli.main(["run", "--config", _write_cfg(tmp_path, cfg), "--out", str(tmp_path / "x")]) == 3


def test_cli_sweep(tmp_path):
    path = _write_cfg(tmp_path, tiny_config(tmp_path))
    code = cli.main(["sweep", "--config", path, "--axis", "objective", "--values",
                     "none,pixel_cls", "--out", str(tmp_path / "sw")])
    assert code == 0
    assert len(read_csv(tmp_path / "sw" / "sweep.csv")) == 2


def test_cli_datagen(tmp_path):
    cfg = tiny_config(tmp_path)
    path = _write_cfg(tmp_path, cfg)
    assert cli.main(["datagen", "--config", path, "--out", str(tmp_path / "d")]) == 0
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert len(manifest["pairs"]) == 6 + 6 + 4


def test_cli_gradcheck(capsys):
    assert cli.main(["gradcheck", "--cases", "1"]) == 0
    out = capsys.readouterr().out
    assert out.count("ok") == 13
