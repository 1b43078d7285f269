"""Experiment configuration documents.

A run is described by one JSON object with four sections::

    {
      "model": {"depth": 20, "stage_channels": [16], "lambda": 1.0, ...},
      "heads": {"positions": [13, 17, 20], "nu": 2.0, "min_position": 10},
      "data":  {"source": "synthetic", "generator": "spiral", ...},
      "train": {"strategy": "multipath", "seed": 0, "epochs": 30, ...}
    }

Every key is optional except ``model.depth``; unknown keys are errors.
:func:`resolve` fills in every default so the echoed document fully
determines the run.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields

from . import network as N
from .data import DataSpec
from .training import STRATEGIES, OptimConfig

SECTIONS = ("model", "heads", "data", "train")

# model keys that live in other sections of a run document
_MODEL_OWN = {f.name for f in fields(N.ModelConfig)} - {"head_positions", "nu", "min_head_position", "seed", "lam"}
_MODEL_OWN |= {"lambda"}

HEAD_DEFAULTS = {"nu": 2.0, "min_position": 10}


@dataclass
class TrainSpec:
    strategy: str = "multipath"
    seed: int = 0
    epochs: int = 30
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 128
    milestones: list = field(default_factory=lambda: [0.4, 0.6])
    lr_decay: float = 10.0
    head_order: str = "shallow_first"
    ratio_samples: int = 128  # held-out batch for per-epoch supervision ratios; 0 disables
    ratio_strategies: list = field(default_factory=lambda: list(STRATEGIES))

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise N.ConfigError(f"unknown strategy {self.strategy!r}; choose from {list(STRATEGIES)}")
        if self.epochs < 1:
            raise N.ConfigError("train.epochs must be >= 1")
        bad = [s for s in self.ratio_strategies if s not in STRATEGIES]
        if bad:
            raise N.ConfigError(f"unknown ratio strategies {bad}")
        self.optim()  # validates

    def optim(self):
        return OptimConfig(lr=self.lr, momentum=self.momentum, weight_decay=self.weight_decay,
                           batch_size=self.batch_size, milestones=tuple(self.milestones),
                           lr_decay=self.lr_decay, head_order=self.head_order)


def _strict(section, d, allowed):
    if not isinstance(d, dict):
        raise N.ConfigError(f"section {section!r} must be a JSON object")
    unknown = set(d) - set(allowed)
    if unknown:
        raise N.ConfigError(f"unknown {section} config keys: {sorted(unknown)}")


def parse(doc):
    """Validate a raw document's shape (sections and keys) without resolving."""
    if not isinstance(doc, dict):
        raise N.ConfigError("config must be a JSON object")
    unknown = set(doc) - set(SECTIONS)
    if unknown:
        raise N.ConfigError(f"unknown config sections: {sorted(unknown)}")
    _strict("model", doc.get("model", {}), _MODEL_OWN)
    _strict("heads", doc.get("heads", {}), {"positions", *HEAD_DEFAULTS})
    _strict("data", doc.get("data", {}), {f.name for f in fields(DataSpec)})
    _strict("train", doc.get("train", {}), {f.name for f in fields(TrainSpec)})
    if "depth" not in doc.get("model", {}):
        raise N.ConfigError("model.depth is required")
    return doc


def load(path):
    with open(path, encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise N.ConfigError(f"{path}: invalid JSON: {e}") from e
    return parse(doc)


def resolve(doc, input_shape=None, num_classes=None, strategy=None, seed=None, epochs=None):
    """Return a new document with all defaults filled in and overrides applied.

    ``input_shape``/``num_classes`` come from the loaded dataset when the
    model section leaves them out.
    """
    doc = copy.deepcopy(parse(doc))
    train = dict(doc.get("train", {}))
    for key, val in (("strategy", strategy), ("seed", seed), ("epochs", epochs)):
        if val is not None:
            train[key] = val
    train = asdict(TrainSpec(**train))
    data = asdict(DataSpec(**doc.get("data", {})))
    heads = {**HEAD_DEFAULTS, **doc.get("heads", {})}
    model = dict(doc["model"])
    if "input_shape" not in model:
        model["input_shape"] = input_shape or data_input_shape(data) or [3, 32, 32]
    if "num_classes" not in model:
        model["num_classes"] = num_classes or (data["classes"] if data["source"] == "synthetic" else 10)
    heads.setdefault("positions", [model["depth"]])
    out = {"model": model, "heads": heads, "data": data, "train": train}
    mc = model_config(out)  # fills and validates model defaults
    md = mc.to_dict()
    out["model"] = {k: md[k] for k in md if k in _MODEL_OWN}
    return out


def data_input_shape(data):
    return DataSpec(**data).input_shape()


def model_config(doc):
    """Build the :class:`~auxnet.network.ModelConfig` a run document describes.

    The model is initialized from ``train.seed``.
    """
    model = dict(doc["model"])
    heads = {**HEAD_DEFAULTS, **doc.get("heads", {})}
    model["head_positions"] = heads.get("positions", [model["depth"]])
    model["nu"] = heads["nu"]
    model["min_head_position"] = heads["min_position"]
    model["seed"] = doc.get("train", {}).get("seed", 0)
    try:
        return N.ModelConfig.from_dict(model)
    except TypeError as e:
        raise N.ConfigError(str(e)) from e


def train_spec(doc):
    return TrainSpec(**doc.get("train", {}))


def data_spec(doc):
    return DataSpec(**doc.get("data", {}))


def is_run_document(doc):
    return isinstance(doc, dict) and "model" in doc and isinstance(doc["model"], dict)


def dumps(doc):
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"
