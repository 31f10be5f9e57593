"""Run configuration: one JSON file describes one reproducible experiment.

Schema (every key optional except where noted)::

    {
      "seed": 0,
      "dataset": {"kind": "rings2d", "n_train": 1000, "n_test": 200, "seed": 1},
      "model": {"widths": [32, 32], "activation": "relu", "seed": 0,
                "training": "standard" | "adversarial",
                "train": {TrainConfig fields}},
      "threat": {"p": "inf" | "2", "eps": 0.05},
      "defense": {"kind": "none", "overrides": {...}, "policy": "seeded",
                  "grad_mode": null, "seed": 0},
      "aux": {"discriminator": {"mode": "aid" | "atld", "widths": [...], "train": {...}},
              "score": {"sigma": 0.25, "widths": [...], "train": {...}},
              "encoder": {"dim": 16, "widths": [...], "train": {...}},
              "embeddings": {"rank": 8},
              "bank": {"size": 64}},
      "plan": {"stages": [...], "budgets": {"<stage>": {StageBudget fields}},
               "losses": ["ce", "cw", "targeted-dlr"], "hedge_gradient_steps": 5,
               "wallclock_repeats": 30, "n_eval": 1000},
      "output_dir": "out"
    }

The digest is the SHA-256 of the canonical JSON (sorted keys, no
whitespace) of everything except ``output_dir``.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, fields

from workbench.data import KINDS

SECTIONS = ("seed", "dataset", "model", "threat", "defense", "aux", "plan", "output_dir")
# sections that determine trained artifacts; evaluation-only edits keep checkpoints valid
TRAIN_SECTIONS = ("seed", "dataset", "model", "threat", "aux")

DEFAULTS = {
    "seed": 0,
    "dataset": {"kind": "rings2d", "n_train": 1000, "n_test": 200, "seed": 1},
    "model": {"widths": [32, 32], "activation": "relu", "seed": 0, "training": "standard", "train": {}},
    "threat": {"p": "inf", "eps": 0.05},
    "defense": {"kind": "none", "overrides": {}, "policy": "seeded", "grad_mode": None, "seed": 0},
    "aux": {},
    "plan": {},
    "output_dir": "out",
}


class ConfigError(ValueError):
    pass


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def canonical(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass
class RunConfig:
    data: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    def __post_init__(self):
        unknown = set(self.data) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        self.data = _merge(DEFAULTS, self.data)
        self.validate()

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls(d)

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_dict(raw)

    def validate(self):
        d = self.data
        ds = d["dataset"]
        if ds.get("kind") not in KINDS:
            raise ConfigError(f"unknown dataset kind {ds.get('kind')!r}; expected one of {', '.join(KINDS)}")
        for key in ("n_train", "n_test"):
            if not isinstance(ds.get(key), int) or ds[key] < 1:
                raise ConfigError(f"dataset.{key} must be a positive integer")
        if d["threat"].get("p") not in ("inf", "2"):
            raise ConfigError("threat.p must be 'inf' or '2'")
        eps = d["threat"].get("eps")
        if not isinstance(eps, (int, float)) or eps < 0:
            raise ConfigError("threat.eps must be a non-negative number")
        if d["model"].get("training") not in ("standard", "adversarial"):
            raise ConfigError("model.training must be 'standard' or 'adversarial'")
        from workbench.models import TrainConfig

        names = {f.name for f in fields(TrainConfig)}
        blocks = [("model", d["model"].get("train", {}))]
        blocks += [(f"aux.{k}", v.get("train", {})) for k, v in d["aux"].items() if isinstance(v, dict)]
        for where, block in blocks:
            bad = set(block) - names
            if bad:
                raise ConfigError(f"{where}.train has unknown keys {sorted(bad)}")
        for k in d["aux"]:
            if k not in ("discriminator", "score", "encoder", "embeddings", "bank"):
                raise ConfigError(f"unknown aux model {k!r}")

    # -- accessors -----------------------------------------------------------

    def __getitem__(self, key):
        return self.data[key]

    def with_seed(self, seed):
        return RunConfig(_merge(self.data, {"seed": seed}))

    def with_output(self, path):
        return RunConfig(_merge(self.data, {"output_dir": path}))

    def content(self):
        return {k: v for k, v in self.data.items() if k != "output_dir"}

    @property
    def digest(self):
        return hashlib.sha256(canonical(self.content()).encode()).hexdigest()

    @property
    def train_digest(self):
        part = {k: self.data[k] for k in TRAIN_SECTIONS}
        return hashlib.sha256(canonical(part).encode()).hexdigest()

    def train_config(self, section=None):
        """TrainConfig for the classifier or an aux model, seeded from the run seed."""
        from workbench.models import TrainConfig

        block = self.data["model"] if section is None else self.data["aux"].get(section, {})
        kw = {"seed": self.data["seed"], **block.get("train", {})}
        return TrainConfig(**kw)
