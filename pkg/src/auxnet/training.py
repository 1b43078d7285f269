"""Training strategies for multi-head residual networks.

``plain``     one forward, backprop of the final loss only.
``joint``     one forward, one backprop of ``loss + sum_k gamma_k * loss_k``.
``pairwise``  per head (shallowest first): fresh forward up to that head,
              backprop of ``gamma_k * loss_k``, immediate update.
``multipath`` one shared forward; then per head a backprop of
              ``gamma_k * loss_k`` through the cached features with the
              current weights, each followed by an immediate update.

All strategies share one SGD optimizer whose momentum buffer is carried
once per iteration; per-head updates add into it. With a single head the
four strategies run the same float operations in the same order.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import network as N

STRATEGIES = ("plain", "joint", "pairwise", "multipath")


@dataclass
class OptimConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 128
    milestones: tuple = (0.4, 0.6)
    lr_decay: float = 10.0
    head_order: str = "shallow_first"  # or "deep_first"

    def __post_init__(self):
        self.milestones = tuple(self.milestones)
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch normalization)")
        if self.head_order not in ("shallow_first", "deep_first"):
            raise ValueError(f"head_order must be shallow_first or deep_first, got {self.head_order!r}")


def lr_at(config, epoch, epochs):
    """Step schedule: divide by ``lr_decay`` at each milestone fraction."""
    lr = config.lr
    for frac in config.milestones:
        if epoch >= frac * epochs:
            lr = lr / config.lr_decay
    return lr


class SGD:
    """Momentum SGD with per-iteration momentum carry.

    ``begin_iteration`` applies ``v <- mu * v + wd * w`` and moves the
    weights by ``-lr * v``; every later ``apply`` adds a gradient into ``v``
    and moves the weights by ``-lr * g``. Over one iteration this equals
    ``v <- mu * v + wd * w + sum(g)``, ``w <- w - lr * v``.
    """

    def __init__(self, params, config):
        self.params = params
        self.config = config
        self.lr = config.lr
        self.velocity = {n: np.zeros_like(a) for n, a in params.items()}

    def begin_iteration(self, names):
        mu, wd, lr = self.config.momentum, self.config.weight_decay, self.lr
        for n in names:
            v, w = self.velocity[n], self.params[n]
            v *= mu
            if wd:
                v += wd * w
            w -= lr * v

    def apply(self, grads):
        lr = self.lr
        for n, g in grads.items():
            self.velocity[n] += g
            self.params[n] -= lr * g


@dataclass
class StepResult:
    losses: list  # per head; None where the strategy did not compute it
    forwards: int
    backwards: int


def _trained_names(model, strategy):
    if strategy == "plain":
        return model.trunk_names() + [n for n in model.parameters() if n.startswith(f"head{model.K + 1}.")]
    return list(model.parameters())


def _head_order(model, opt):
    order = list(range(model.K + 1))
    return order[::-1] if opt.config.head_order == "deep_first" else order


def step_plain(model, x, y, opt):
    opt.begin_iteration(_trained_names(model, "plain"))
    cache = N.forward(model, x, y)
    g = N.backward(model, cache, {model.K: model.gamma[model.K]})
    opt.apply(g.params)
    return StepResult(cache.losses, 1, 1)


def joint_weights(model):
    return {k: model.gamma[k] for k in range(model.K + 1)}


def step_joint(model, x, y, opt):
    opt.begin_iteration(_trained_names(model, "joint"))
    cache = N.forward(model, x, y)
    g = N.backward(model, cache, joint_weights(model))
    opt.apply(g.params)
    return StepResult(cache.losses, 1, 1)


def step_pairwise(model, x, y, opt):
    opt.begin_iteration(_trained_names(model, "pairwise"))
    losses = [None] * (model.K + 1)
    order = _head_order(model, opt)
    for k in order:
        cache = N.forward(model, x, y, upto=model.heads[k].position, heads=[k])
        losses[k] = cache.losses[k]
        g = N.backward(model, cache, {k: model.gamma[k]})
        opt.apply(g.params)
    return StepResult(losses, len(order), len(order))


def step_multipath(model, x, y, opt):
    opt.begin_iteration(_trained_names(model, "multipath"))
    cache = N.forward(model, x, y)
    order = _head_order(model, opt)
    for k in order:
        g = N.backward(model, cache, {k: model.gamma[k]})
        opt.apply(g.params)
    return StepResult(cache.losses, 1, len(order))


STEPS = {"plain": step_plain, "joint": step_joint, "pairwise": step_pairwise, "multipath": step_multipath}


@dataclass
class EpochRow:
    epoch: int
    strategy: str
    lr: float
    train_loss: list
    test_err: list
    seconds: float
    safe_err: float | None = None


@dataclass
class StrategyReport:
    strategy: str
    rows: list = field(default_factory=list)
    forwards_per_iter: int = 0
    backwards_per_iter: int = 0
    iterations: int = 0
    ratio_traces: list = field(default_factory=list)

    @property
    def final_test_err(self):
        return self.rows[-1].test_err


class TrainingDiverged(RuntimeError):
    pass


def iterate_batches(n, batch_size, rng):
    """Shuffled index batches; a trailing batch of one sample is dropped
    because batch normalization cannot train on it."""
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        idx = perm[i:i + batch_size]
        if len(idx) >= 2:
            yield idx


def train(model, train_set, strategy, epochs, opt_config=None, test_set=None, seed=0,
          on_epoch=None, ratio_batch=None):
    """Train ``model`` in place for ``epochs`` epochs.

    ``train_set``/``test_set`` are ``(x, y)`` pairs. ``on_epoch(row)`` is
    called after each epoch. When ``ratio_batch`` is given, supervision
    ratios are measured on it at the end of every epoch.
    """
    from .inference import evaluate_heads
    from .instrumentation import supervision_ratio

    if strategy not in STEPS:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    x, y = train_set
    if len(x) < 2:
        raise ValueError("training set needs at least 2 samples")
    cfg = opt_config or OptimConfig()
    bs = min(cfg.batch_size, len(x))
    opt = SGD(model.parameters(), cfg)
    rng = np.random.default_rng(seed)
    step = STEPS[strategy]
    report = StrategyReport(strategy)
    for epoch in range(epochs):
        t0 = time.perf_counter()
        opt.lr = lr_at(cfg, epoch, epochs)
        sums = np.zeros(model.K + 1)
        counts = np.zeros(model.K + 1)
        for it, idx in enumerate(iterate_batches(len(x), bs, rng)):
            try:
                res = step(model, x[idx], y[idx], opt)
            except N.DivergenceError as e:
                raise TrainingDiverged(f"{strategy}: diverged at epoch {epoch + 1}, iteration {it + 1}: {e}") from e
            for k, l in enumerate(res.losses):
                if l is not None:
                    sums[k] += l
                    counts[k] += 1
            report.forwards_per_iter, report.backwards_per_iter = res.forwards, res.backwards
            report.iterations += 1
        train_loss = [float(s / c) if c else float("nan") for s, c in zip(sums, counts)]
        test_err, safe_err = [float("nan")] * (model.K + 1), None
        if test_set is not None:
            ev = evaluate_heads(model, *test_set)
            test_err, safe_err = ev.head_errors, ev.safe_error
        row = EpochRow(epoch + 1, strategy, opt.lr, train_loss, test_err, time.perf_counter() - t0, safe_err)
        report.rows.append(row)
        if ratio_batch is not None:
            report.ratio_traces.append(supervision_ratio(model, *ratio_batch, strategy, epoch=epoch + 1))
        if on_epoch is not None:
            on_epoch(row)
    return model, report
