"""Declarative experiment configuration.

A config is a YAML mapping with a top-level ``experiment`` key plus nested
sections. Every experiment has a complete set of desk-scale defaults below;
a user file only overrides what it names. Unknown keys are rejected and
numeric ranges are checked before any computation starts.
"""

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

EXPERIMENTS = ("toy-width-sweep", "clustering", "ntk-diagnostics", "kgf-compare", "estimator-audit")

_COMMON = {"seed": 0, "replicates": 1, "output_dir": "runs", "workers": 1}

DEFAULTS = {
    "toy-width-sweep": {
        "replicates": 5,
        "model": {"sigma": 0.5, "wrap_terms": 10, "grid_size": 2048},
        "widths": [64, 256, 1024],
        "train": {"steps": 20000, "batch_size": 16, "base_lr": 1e-4, "record_every": 1000,
                  "optimizer": "adam"},
        "eval": {"n": 1000},
    },
    "clustering": {
        "replicates": 10,
        "model": {"mu": [-20.0, -10.0, 0.0, 10.0, 20.0], "sigma": 0.5, "tau": 0.1,
                  "n_obs": 1000, "prior_s_std": 100.0, "observed_s": 100.0},
        "parameterizations": ["mean", "natural"],
        "encoder": {"hidden": 32, "element_depth": 1, "head_depth": 3, "input_scale": 10.0,
                    "scale_mean": 10.0, "scale_natural": [30.0, 3.0]},
        "fkl": {"batch_size": 4, "base_lr": 3e-3, "steps": 3000},
        "elbo": {"K": 10, "n_mc": 1, "base_lr": 3e-3, "steps": 3000},
        "kde": {"n_grid": 512},
    },
    "ntk-diagnostics": {
        "replicates": 10,
        "widths": [64, 256, 1024, 4096],
        "grid_size": 32,
        "mc": {"samples": 1000000, "pairs": 20},
        "drift": {"widths": [64, 1024], "steps": 5000, "batch_size": 16, "base_lr": 0.5,
                  "optimizer": "sgd", "record_every": 500},
        "model": {"sigma": 0.5, "wrap_terms": 10, "grid_size": 2048},
    },
    "kgf-compare": {
        "replicates": 5,
        "model": {"sigma": 0.5, "wrap_terms": 10, "grid_size": 2048},
        "grid": {"n": 32, "seed": 0},
        "widths": [64, 256, 1024],
        "flow": {"h": 0.01, "T": 10.0, "record_stride": 100},
        "lyapunov": {"T": 50.0, "tol": 0.1, "t_min": 1.0},
    },
    "estimator-audit": {
        "replicates": 1,
        "model": {"sigma": 0.5, "wrap_terms": 10, "grid_size": 2048},
        "width": 16,
        "n_estimates": 10000,
        "batch_sizes": [16, 1],
        "oracle_samples": 1000000,
        "fd_step": 1e-5,
        "threshold": 1e-3,
        "z": 4.0,
    },
}


class ConfigError(ValueError):
    """Raised for malformed or out-of-range configuration values."""


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key '{where}'; allowed: {sorted(base)}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"'{where}' must be a mapping")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def _positive(value, where, integer=False):
    if integer and (not isinstance(value, (int, np.integer)) or isinstance(value, bool)):
        raise ConfigError(f"'{where}' must be an integer, got {value!r}")
    if not isinstance(value, (int, float, np.integer, np.floating)) or not value > 0:
        raise ConfigError(f"'{where}' must be positive, got {value!r}")


_POSITIVE_INT = {"steps", "batch_size", "record_every", "replicates", "workers", "n", "grid_size",
                 "samples", "pairs", "width", "n_estimates", "oracle_samples", "K", "n_mc",
                 "hidden", "element_depth", "head_depth", "n_obs", "record_stride", "n_grid",
                 "wrap_terms"}
_POSITIVE_REAL = {"base_lr", "sigma", "tau", "prior_s_std", "input_scale", "scale_mean", "h", "T",
                  "fd_step", "threshold", "z", "t_min"}


def _validate(tree, path=""):
    for key, value in tree.items():
        where = f"{path}{key}"
        if isinstance(value, dict):
            _validate(value, where + ".")
        elif key in _POSITIVE_INT:
            _positive(value, where, integer=True)
        elif key in _POSITIVE_REAL:
            _positive(value, where)
        elif key in ("widths", "batch_sizes"):
            if not value:
                raise ConfigError(f"'{where}' must be a nonempty list")
            for v in value:
                _positive(v, where, integer=True)
        elif key == "scale_natural":
            if len(value) != 2:
                raise ConfigError(f"'{where}' must have two entries")
            for v in value:
                _positive(v, where)
        elif key == "optimizer" and value not in ("adam", "sgd"):
            raise ConfigError(f"'{where}' must be 'adam' or 'sgd', got {value!r}")
        elif key == "parameterizations":
            if not value or any(v not in ("mean", "natural") for v in value):
                raise ConfigError(f"'{where}' entries must be 'mean' or 'natural'")
    if tree.get("tol", 0) < 0:
        raise ConfigError(f"'{path}tol' must be nonnegative")
    if "seed" in tree and (not isinstance(tree["seed"], (int, np.integer)) or tree["seed"] < 0):
        raise ConfigError(f"'{path}seed' must be a nonnegative integer")


@dataclass
class ExperimentConfig:
    experiment: str
    settings: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        name = data.pop("experiment", None)
        if name not in EXPERIMENTS:
            raise ConfigError(f"'experiment' must be one of {list(EXPERIMENTS)}, got {name!r}")
        settings = _merge({**_COMMON, **copy.deepcopy(DEFAULTS[name])}, data)
        _validate(settings)
        if name == "clustering" and settings["replicates"] < 2:
            raise ConfigError("clustering needs at least 2 replicates")
        return cls(name, settings)

    @classmethod
    def default(cls, experiment):
        return cls.from_dict({"experiment": experiment})

    @classmethod
    def load(cls, path):
        with Path(path).open() as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ConfigError("config file must contain a mapping")
        return cls.from_dict(data)

    def to_dict(self):
        return {"experiment": self.experiment, **copy.deepcopy(self.settings)}

    def dump(self, path):
        with Path(path).open("w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=True)

    def override(self, **values):
        data = self.to_dict()
        data.update({k: v for k, v in values.items() if v is not None})
        return ExperimentConfig.from_dict(data)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def __getitem__(self, key):
        return self.settings[key]


def replicate_seed(master, replicate, *keys):
    """Deterministic 32-bit seed for one replicate (and optional sub-streams)."""
    seq = np.random.SeedSequence(master, spawn_key=(replicate, *keys))
    return int(seq.generate_state(1)[0])
