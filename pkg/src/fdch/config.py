"""Run configuration: one JSON file, fixed key set, defaults for omitted keys.

Example::

    {
      "seed": 0, "bits": 16, "out": "run",
      "data": null,
      "synthetic": {"n": 400, "d_v": 16, "d_t": 12, "c": 2, "noise": 0.15},
      "split": {"n_query": 100, "n_train": 300},
      "arch": {"feature_hidden": [128], "common_dim": 64, "fusion_hidden": [64],
               "warm_start": true},
      "stage1": {"lambda": 1.0, "eta": 1.0, "lr": 0.01, "epochs": 30, "batch_size": 32},
      "stage2": {"gamma": 1.0, "beta": 1.0, "alpha": 1.0, "lr": 0.01, "epochs": 30,
                 "batch_size": 32, "ablation": "none"}
    }

``data`` may instead name three CSV files (``image``, ``text``, ``labels``);
relative paths resolve against the config file's directory.
"""

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .stage1 import Stage1Arch, Stage1Hyper
from .stage2 import Stage2Hyper

DEFAULTS = {
    "seed": 0,
    "bits": 16,
    "out": "run",
    "data": None,
    "synthetic": {"n": 400, "d_v": 16, "d_t": 12, "c": 2, "noise": 0.15},
    "split": {"n_query": 100, "n_train": 300},
    "arch": {"feature_hidden": [128], "common_dim": 64, "fusion_hidden": [64], "warm_start": True},
    "stage1": {"lambda": 1.0, "eta": 1.0, "lr": 0.01, "epochs": 30, "batch_size": 32},
    "stage2": {
        "gamma": 1.0,
        "beta": 1.0,
        "alpha": 1.0,
        "lr": 0.01,
        "epochs": 30,
        "batch_size": 32,
        "ablation": "none",
    },
}
_DATA_KEYS = {"image", "text", "labels"}


def _merge(base, override, where):
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {where}{key!r} must be an object")
            out[key] = _merge(base[key], val, f"{where}{key}.")
        elif key == "data" and val is not None:
            if not isinstance(val, dict) or set(val) != _DATA_KEYS:
                raise ConfigError("config key 'data' needs exactly image, text and labels paths")
            out[key] = dict(val)
        else:
            out[key] = val
    return out


@dataclass
class RunConfig:
    raw: dict
    base_dir: Path

    @classmethod
    def from_dict(cls, d, base_dir="."):
        cfg = cls(_merge(DEFAULTS, d or {}, ""), Path(base_dir))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path=None, overrides=None):
        d = {}
        base = Path(".")
        if path is not None:
            path = Path(path)
            try:
                d = json.loads(path.read_text())
            except FileNotFoundError:
                raise ConfigError(f"config file not found: {path}") from None
            except json.JSONDecodeError as e:
                raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
            if not isinstance(d, dict):
                raise ConfigError("config file must hold a JSON object")
            base = path.parent
        cfg = cls(_merge(DEFAULTS, d, ""), base)
        for key, val in (overrides or {}).items():
            if val is None:
                continue
            section, _, leaf = key.rpartition(".")
            target = cfg.raw[section] if section else cfg.raw
            target[leaf] = val
        cfg.validate()
        return cfg

    def validate(self):
        try:
            self.stage1_hyper()
            self.stage2_hyper()
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None
        if not isinstance(self.raw["bits"], int) or self.raw["bits"] < 1:
            raise ConfigError(f"bits must be a positive integer, got {self.raw['bits']!r}")

    @property
    def seed(self):
        return int(self.raw["seed"])

    @property
    def bits(self):
        return int(self.raw["bits"])

    @property
    def out_dir(self):
        return Path(self.raw["out"])

    def data_paths(self):
        d = self.raw["data"]
        if d is None:
            return None
        return tuple(self.base_dir / d[key] for key in ("image", "text", "labels"))

    def arch(self):
        a = self.raw["arch"]
        return Stage1Arch(tuple(a["feature_hidden"]), int(a["common_dim"]), tuple(a["fusion_hidden"]))

    def stage1_hyper(self):
        s = self.raw["stage1"]
        return Stage1Hyper(
            lam=float(s["lambda"]),
            eta=float(s["eta"]),
            lr=float(s["lr"]),
            epochs=int(s["epochs"]),
            batch_size=int(s["batch_size"]),
            k=self.bits,
            seed=self.seed,
        )

    def stage2_hyper(self):
        s = self.raw["stage2"]
        return Stage2Hyper(
            gamma=float(s["gamma"]),
            beta=float(s["beta"]),
            alpha=float(s["alpha"]),
            lr=float(s["lr"]),
            epochs=int(s["epochs"]),
            batch_size=int(s["batch_size"]),
            seed=self.seed,
            ablation=str(s["ablation"]),
        )

    def canonical_json(self):
        # the output location does not influence any result
        body = {k: v for k, v in self.raw.items() if k != "out"}
        return json.dumps(body, sort_keys=True, separators=(",", ":"))

    def digest(self):
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()
