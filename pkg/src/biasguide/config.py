"""Experiment configuration and its JSON file schema.

A config file is a JSON object with optional sections; every key is optional
and unknown keys are rejected with their full path::

    {
      "seed": 0,
      "data":     {"classes": 2, "per_class_count": 2000, "severity": 0.01, ...},
      "model":    {"channels": [16, 32, 32], "kernel": 3, "stride": 2},
      "ensemble": {"count": 5, "iters": 300, "q": 0.7, "threshold": 0.99},
      "tracker":  {"alpha_l": 0.1, "alpha_s": 0.9, "t1": 200, "log_every": 100},
      "guidance": {"tau": 2.0, "lambda_sim": 0.1, "t2": 1000},
      "train":    {"total_iters": 5000, "batch_size": 64, "learning_rate": 0.05,
                   "mode": "full", "guide_loss": true, "bn_loss": true,
                   "pair_source": "dbn", "score_weight": true,
                   "eval_every": 250, "log_every": 1, "checkpoint_every": 1000,
                   "flip": true}
    }
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace

from .data import DataConfig
from .errors import ConfigError, SchemaError
from .models import ArchConfig
from .optim import OPTIMIZERS

MODES = ("full", "vanilla", "reweight_only")
PAIR_SOURCES = ("dbn", "cand", "d")


@dataclass(frozen=True)
class ExperimentConfig:
    alpha_l: float = 0.1
    alpha_s: float = 0.9
    tau: float = 2.0
    lambda_sim: float = 0.1
    t1: int = 200
    t2: int = 1000
    total_iters: int = 5000
    batch_size: int = 64
    q: float = 0.7
    amplified_threshold: float = 0.99
    ensemble_count: int = 5
    ensemble_iters: int = 300
    learning_rate: float = 0.05
    optimizer: str = "sgd"
    seed: int = 0
    mode: str = "full"
    guide_loss: bool = True
    bn_loss: bool = True
    pair_source: str = "dbn"
    score_weight: bool = True
    flip: bool = True
    eval_every: int = 250
    log_every: int = 1
    tracker_log_every: int = 100
    checkpoint_every: int = 1000

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.pair_source not in PAIR_SOURCES:
            raise ConfigError(f"pair_source must be one of {PAIR_SOURCES}, got {self.pair_source!r}")
        if not (0 <= self.t1 <= self.t2 <= self.total_iters):
            # t2 == total_iters is allowed: the guided phase is simply never entered
            raise ConfigError(f"need 0 <= t1 <= t2 <= total_iters, got {self.t1}, {self.t2}, {self.total_iters}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.ensemble_count < 1 or self.ensemble_count % 2 == 0:
            raise ConfigError(f"ensemble_count must be odd, got {self.ensemble_count}")
        if self.ensemble_iters < 1:
            raise ConfigError("ensemble_iters must be >= 1")
        if not 0 < self.q <= 1:
            raise ConfigError(f"q must lie in (0, 1], got {self.q}")
        if not 0.5 < self.amplified_threshold <= 1:
            raise ConfigError("amplified_threshold must lie in (0.5, 1]")
        for name in ("alpha_l", "alpha_s"):
            if not 0 < getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in (0, 1]")
        if self.tau <= 0 or self.lambda_sim < 0 or self.learning_rate <= 0:
            raise ConfigError("tau and learning_rate must be positive, lambda_sim non-negative")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        for name in ("eval_every", "log_every", "tracker_log_every", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        return self

    @property
    def guided(self):
        return self.mode == "full"

    def tag(self):
        """Short run label, e.g. ``full``, ``full-pair_d-no_bn``, ``vanilla``."""
        if self.mode != "full":
            return self.mode
        parts = ["full"]
        if self.pair_source != "dbn":
            parts.append(f"pair_{self.pair_source}")
        if not self.guide_loss:
            parts.append("no_guide")
        if not self.bn_loss:
            parts.append("no_bn")
        if not self.score_weight:
            parts.append("no_score_weight")
        return "-".join(parts)


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = DataConfig()
    model: ArchConfig = ArchConfig()
    experiment: ExperimentConfig = ExperimentConfig()

    @property
    def seed(self):
        return self.experiment.seed

    def arch(self):
        return replace(self.model, num_classes=self.data.classes, in_hw=self.data.image_size)

    def validate(self):
        self.data.validate()
        self.arch().validate()
        self.experiment.validate()
        return self

    def to_dict(self):
        return {
            "seed": self.experiment.seed,
            "data": asdict(self.data),
            "model": {"channels": list(self.model.channels), "kernel": self.model.kernel,
                      "stride": self.model.stride},
            "ensemble": {k: getattr(self.experiment, f) for k, f in _SECTIONS["ensemble"].items()},
            "tracker": {k: getattr(self.experiment, f) for k, f in _SECTIONS["tracker"].items()},
            "guidance": {k: getattr(self.experiment, f) for k, f in _SECTIONS["guidance"].items()},
            "train": {k: getattr(self.experiment, f) for k, f in _SECTIONS["train"].items()},
        }

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self, sections=None):
        d = self.to_dict()
        if sections is not None:
            d = {k: d[k] for k in sections}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


# config-file key -> ExperimentConfig field, per section
_SECTIONS = {
    "ensemble": {"count": "ensemble_count", "iters": "ensemble_iters", "q": "q",
                 "threshold": "amplified_threshold"},
    "tracker": {"alpha_l": "alpha_l", "alpha_s": "alpha_s", "t1": "t1", "log_every": "tracker_log_every"},
    "guidance": {"tau": "tau", "lambda_sim": "lambda_sim", "t2": "t2"},
    "train": {"total_iters": "total_iters", "batch_size": "batch_size", "learning_rate": "learning_rate",
              "optimizer": "optimizer", "mode": "mode", "guide_loss": "guide_loss", "bn_loss": "bn_loss",
              "pair_source": "pair_source", "score_weight": "score_weight", "flip": "flip",
              "eval_every": "eval_every", "log_every": "log_every",
              "checkpoint_every": "checkpoint_every"},
}
_MODEL_KEYS = ("channels", "kernel", "stride")
_TOP_KEYS = {"seed", "data", "model", *_SECTIONS}


def _typed(value, default, path):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise SchemaError(f"expected a boolean, got {value!r}", path)
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise SchemaError(f"expected an integer, got {value!r}", path)
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise SchemaError(f"expected a number, got {value!r}", path)
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise SchemaError(f"expected a string, got {value!r}", path)
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise SchemaError(f"expected a list, got {value!r}", path)
        return tuple(_typed(v, default[0], f"{path}[{i}]") for i, v in enumerate(value))
    raise SchemaError("unsupported value", path)


def from_dict(raw):
    if not isinstance(raw, dict):
        raise SchemaError("config root must be an object")
    for key in raw:
        if key not in _TOP_KEYS:
            raise SchemaError("unknown key", key)
    exp_defaults = ExperimentConfig()
    exp_kw = {}
    if "seed" in raw:
        exp_kw["seed"] = _typed(raw["seed"], 0, "seed")
    for section, mapping in _SECTIONS.items():
        body = raw.get(section, {})
        if not isinstance(body, dict):
            raise SchemaError("section must be an object", section)
        for key, value in body.items():
            if key not in mapping:
                raise SchemaError("unknown key", f"{section}.{key}")
            f = mapping[key]
            exp_kw[f] = _typed(value, getattr(exp_defaults, f), f"{section}.{key}")
    data_defaults = DataConfig()
    data_kw = {}
    body = raw.get("data", {})
    if not isinstance(body, dict):
        raise SchemaError("section must be an object", "data")
    data_fields = {f.name for f in fields(DataConfig)}
    for key, value in body.items():
        if key not in data_fields:
            raise SchemaError("unknown key", f"data.{key}")
        data_kw[key] = _typed(value, getattr(data_defaults, key), f"data.{key}")
    model_defaults = ArchConfig()
    model_kw = {}
    body = raw.get("model", {})
    if not isinstance(body, dict):
        raise SchemaError("section must be an object", "model")
    for key, value in body.items():
        if key not in _MODEL_KEYS:
            raise SchemaError("unknown key", f"model.{key}")
        model_kw[key] = _typed(value, getattr(model_defaults, key), f"model.{key}")
    return RunConfig(DataConfig(**data_kw), ArchConfig(**model_kw), ExperimentConfig(**exp_kw))


def load(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc}") from None
    return from_dict(raw)


def override(cfg, data=None, experiment=None):
    return RunConfig(
        replace(cfg.data, **(data or {})),
        cfg.model,
        replace(cfg.experiment, **(experiment or {})),
    )
