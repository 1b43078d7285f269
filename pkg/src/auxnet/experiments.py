"""Desk-scale experiments: the shared synthetic task and ablation runs.

The task is a 3-class spiral of 2,000 points fed to a depth-20 residual
stack of 1x1 convolutions (a residual MLP), with heads at layers 13, 17
and 20, trained for 30 epochs. Each function here trains from scratch and
memoizes its result per process, so several checks can share runs.
"""

from __future__ import annotations

import functools
import time
from dataclasses import dataclass

from . import network as N
from .data import DataSpec, load_dataset
from .inference import evaluate_heads
from .instrumentation import supervision_ratio
from .training import OptimConfig, train

DESK_DATA = dict(source="synthetic", generator="spiral", samples=2000, classes=3, noise=0.05,
                 turns=1.5, lift="flat", test_fraction=0.25, seed=0)
DESK_MODEL = dict(depth=20, head_positions=[13, 17, 20], stage_channels=[16], kernel_size=1,
                  nu=2.0, lam=1.0, dtype="float32")
DESK_OPTIM = dict(lr=0.02, batch_size=32, momentum=0.9, weight_decay=1e-4)
DESK_EPOCHS = 30
SEEDS = (0, 1, 2, 3, 4)
RATIO_SAMPLES = 128


@functools.lru_cache(maxsize=None)
def desk_data():
    spec = DataSpec(**DESK_DATA)
    return load_dataset(spec)


def desk_config(seed, **overrides):
    d = {**DESK_MODEL, "input_shape": [2, 1, 1], "num_classes": DESK_DATA["classes"], "seed": seed}
    d.update(overrides)
    return N.ModelConfig(**d)


@dataclass
class Run:
    strategy: str
    seed: int
    model: N.Model
    report: object
    seconds: float

    @property
    def final_error(self):
        return self.report.final_test_err[-1]


def _key(overrides):
    return tuple(sorted((k, tuple(v) if isinstance(v, list) else v) for k, v in overrides.items()))


@functools.lru_cache(maxsize=None)
def _run(strategy, seed, key):
    overrides = {k: list(v) if isinstance(v, tuple) else v for k, v in key}
    train_set, test_set = desk_data()
    model = N.build_model(desk_config(seed, **overrides))
    t0 = time.perf_counter()
    model, report = train(model, train_set, strategy, DESK_EPOCHS, OptimConfig(**DESK_OPTIM),
                          test_set=test_set, seed=seed)
    return Run(strategy, seed, model, report, time.perf_counter() - t0)


def desk_run(strategy, seed, **overrides):
    """Train (or fetch the memoized) desk model for ``strategy`` and ``seed``."""
    return _run(strategy, seed, _key(overrides))


def ratio_batch(n=RATIO_SAMPLES):
    """Fixed held-out measurement batch."""
    _, (x, y) = desk_data()
    return x[:n], y[:n]


def final_ratios(run):
    """Supervision ratios of a trained run, measured the way it trained."""
    return supervision_ratio(run.model, *ratio_batch(), run.strategy, epoch=DESK_EPOCHS)


def truncated_readout_errors(run):
    """Per-head error of the layer-truncated models, without retraining."""
    _, (x, y) = desk_data()
    return [evaluate_heads(N.truncate(run.model, k), x, y).final_error for k in range(run.model.K + 1)]


def head_evaluation(run):
    _, (x, y) = desk_data()
    return evaluate_heads(run.model, x, y)


def majority(flags):
    flags = list(flags)
    return sum(bool(f) for f in flags) * 2 > len(flags)


def ablation_recipes():
    """Run-config documents for the ablations (output count, shallow
    outputs, nu sweep, lambda sweep), all on the desk task."""
    base = {
        "model": {k: v for k, v in DESK_MODEL.items() if k not in ("head_positions", "nu", "lam")}
        | {"lambda": DESK_MODEL["lam"]},
        "heads": {"positions": DESK_MODEL["head_positions"], "nu": DESK_MODEL["nu"], "min_position": 10},
        "data": dict(DESK_DATA),
        "train": {"strategy": "multipath", "seed": 0, "epochs": DESK_EPOCHS, **DESK_OPTIM},
    }

    def variant(**sections):
        doc = {k: dict(v) for k, v in base.items()}
        for sec, upd in sections.items():
            doc[sec].update(upd)
        return doc

    recipes = {"desk-multipath": base,
               # same heads as the others so initialization matches; plain trains only the last one
               "desk-plain": variant(train={"strategy": "plain"}),
               "desk-joint": variant(train={"strategy": "joint"}),
               "desk-pairwise": variant(train={"strategy": "pairwise"})}
    outputs = {"1": [20], "2": [17, 20], "3": [13, 17, 20], "5": [10, 13, 15, 17, 20],
               "9": [10, 11, 12, 13, 14, 15, 17, 19, 20]}
    for n, pos in outputs.items():
        recipes[f"outputs-{n}"] = variant(heads={"positions": pos})
    for pos in ([2, 20], [17, 20]):
        recipes[f"shallow-{pos[0]}"] = variant(heads={"positions": pos, "min_position": 1})
    for nu in (0, 1, 2, 5):
        recipes[f"nu-{nu}"] = variant(heads={"nu": float(nu)})
    for lam in (0.5, 0.95, 1.0):
        for net, heads in (("resnet", {"positions": [20]}), ("auxnet", {})):
            recipes[f"lambda-{lam}-{net}"] = variant(model={"lambda": lam}, heads=heads,
                                                     train={"strategy": "multipath" if heads == {} else "plain"})
    return recipes
