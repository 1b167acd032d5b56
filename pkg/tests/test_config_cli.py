import json

import numpy as np
import pytest
import yaml

from fklvi import cli, evalrpt
from fklvi.config import DEFAULTS, EXPERIMENTS, ConfigError, ExperimentConfig, replicate_seed
from fklvi.runio import RunManifest, read_table

SMALL = {
    "toy-width-sweep": {"replicates": 2, "widths": [8, 16], "eval": {"n": 50},
                        "train": {"steps": 200, "record_every": 100}},
    "clustering": {"replicates": 2, "fkl": {"steps": 20}, "elbo": {"steps": 20}},
    "ntk-diagnostics": {"replicates": 2, "widths": [16, 64], "mc": {"samples": 10000, "pairs": 3},
                        "drift": {"widths": [16, 64], "steps": 100, "record_every": 50}},
    "kgf-compare": {"replicates": 2, "widths": [16, 64], "flow": {"T": 1.0}, "lyapunov": {"T": 2.0}},
    "estimator-audit": {"n_estimates": 200, "oracle_samples": 20000},
}

FILES = {
    "toy-width-sweep": {"curves.csv", "baseline.csv", "summary.csv"},
    "clustering": {"replicates.csv", "table.csv", "kde.csv"},
    "ntk-diagnostics": {"init_distance.csv", "drift.csv", "gram.csv", "mc_check.csv", "summary.csv"},
    "kgf-compare": {"lyapunov.csv", "losses.csv", "distances.csv", "summary.csv"},
    "estimator-audit": {"audit.csv", "summary.csv"},
}
COMMON_FILES = {"README.md", "config.yaml", "manifest.json", "metrics.csv"}


def write_config(tmp_path, name, extra=None):
    path = tmp_path / f"{name}.yaml"
    path.write_text(yaml.safe_dump({"experiment": name, **SMALL[name], **(extra or {})}))
    return path


@pytest.mark.parametrize("name", EXPERIMENTS)
def test_defaults_round_trip(name, tmp_path):
    cfg = ExperimentConfig.default(name)
    cfg.dump(tmp_path / "c.yaml")
    again = ExperimentConfig.load(tmp_path / "c.yaml")
    assert again.to_dict() == cfg.to_dict() and again.digest() == cfg.digest()


def test_unknown_keys_and_ranges_rejected():
    with pytest.raises(ConfigError, match="unknown config key 'train.lr'"):
        ExperimentConfig.from_dict({"experiment": "toy-width-sweep", "train": {"lr": 1.0}})
    with pytest.raises(ConfigError, match="base_lr"):
        ExperimentConfig.from_dict({"experiment": "toy-width-sweep", "train": {"base_lr": -1e-4}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"experiment": "toy-width-sweep", "widths": []})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"experiment": "toy-width-sweep", "train": {"steps": 1.5}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"experiment": "clustering", "parameterizations": ["polar"]})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"experiment": "clustering", "replicates": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"experiment": "nope"})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"experiment": "kgf-compare", "seed": -1})


def test_override_and_digest():
    cfg = ExperimentConfig.default("kgf-compare")
    other = cfg.override(seed=3, replicates=None)
    assert other["seed"] == 3 and other["replicates"] == cfg["replicates"]
    assert other.digest() != cfg.digest()
    assert DEFAULTS["kgf-compare"]["flow"]["h"] == 0.01  # defaults are not mutated


def test_replicate_seed_streams():
    seeds = {replicate_seed(0, r, k) for r in range(10) for k in range(5)}
    assert len(seeds) == 50
    assert replicate_seed(7, 1, 2) == replicate_seed(7, 1, 2)
    assert replicate_seed(7, 1) != replicate_seed(8, 1)


def test_cli_rejects_bad_config(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("experiment: toy-width-sweep\ntrain: {base_lr: -1.0}\n")
    assert cli.main(["toy-width-sweep", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
    assert "base_lr" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()
    other = write_config(tmp_path, "kgf-compare")
    assert cli.main(["toy-width-sweep", "--config", str(other)]) == 2
    assert cli.main(["toy-width-sweep", "--config", str(tmp_path / "missing.yaml")]) == 2
    with pytest.raises(SystemExit):
        cli.main(["not-an-experiment"])


@pytest.mark.parametrize("name", EXPERIMENTS)
def test_cli_runs_and_writes_outputs(name, tmp_path):
    out = tmp_path / "out"
    assert cli.main([name, "--config", str(write_config(tmp_path, name)), "--out", str(out),
                     "--seed", "5"]) == 0
    assert {p.name for p in out.iterdir()} == FILES[name] | COMMON_FILES
    manifest = RunManifest.read(out / "manifest.json")
    assert manifest.status == "complete" and manifest.experiment == name
    assert manifest.config["seed"] == 5
    assert set(manifest.files) >= FILES[name]
    saved = ExperimentConfig.load(out / "config.yaml")
    assert saved.digest() == manifest.config_hash
    records = evalrpt.read_metrics(out / "metrics.csv")
    assert records and all(np.isfinite(r.value) for r in records)
    readme = (out / "README.md").read_text()
    assert all(f in readme for f in FILES[name])
    for f in FILES[name]:
        cols, rows = read_table(out / f)
        assert rows and all(len(r) == len(cols) for r in rows)


def _data_files(out):
    return {p.name: p.read_bytes() for p in sorted(out.iterdir())
            if p.name not in ("manifest.json", "README.md")}


@pytest.mark.parametrize("name", ["toy-width-sweep", "kgf-compare", "clustering"])
def test_rerun_is_bit_identical(name, tmp_path):
    cfg = write_config(tmp_path, name)
    cli.main([name, "--config", str(cfg), "--out", str(tmp_path / "a")])
    cli.main([name, "--config", str(cfg), "--out", str(tmp_path / "b"), "--workers", "2"])
    a, b = _data_files(tmp_path / "a"), _data_files(tmp_path / "b")
    a.pop("config.yaml"), b.pop("config.yaml")  # differs only in the workers field
    assert a == b


def test_seed_changes_results(tmp_path):
    cfg = write_config(tmp_path, "toy-width-sweep")
    cli.main(["toy-width-sweep", "--config", str(cfg), "--out", str(tmp_path / "a"), "--seed", "1"])
    cli.main(["toy-width-sweep", "--config", str(cfg), "--out", str(tmp_path / "b"), "--seed", "2"])
    assert (tmp_path / "a" / "metrics.csv").read_bytes() != (tmp_path / "b" / "metrics.csv").read_bytes()
    meta = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert meta["seeds"]
