"""Supervision-ratio measurement and metrics files."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import network as N
from ._io import atomic_write
from .training import joint_weights

NORM_KIND = "frobenius_batch_mean"


@dataclass
class RatioTrace:
    epoch: int
    strategy: str
    layers: list
    ratios: list
    flagged: list = field(default_factory=list)  # layers with an all-zero gradient
    norm: str = NORM_KIND

    def as_dict(self):
        return dict(zip(self.layers, self.ratios))


def grad_norm(g):
    """Per-sample Frobenius norm, averaged over the batch."""
    g = np.asarray(g, dtype=np.float64)
    return float(np.sqrt((g.reshape(g.shape[0], -1) ** 2).sum(axis=1)).mean())


def nearest_head(model, l):
    for k, h in enumerate(model.heads):
        if h.position >= l:
            return k
    raise ValueError(f"layer {l} is above the last head")


def supervision_ratio(model, x, y, strategy, epoch=0):
    """Ratio of the loss-side gradient norm to the full gradient norm at
    every trunk layer, for the way ``strategy`` backpropagates.

    ``plain``: final loss only, ``||d xi / d x_L|| / ||d xi / d x_l||``.
    ``joint``: numerator is the nearest downstream head's direct gradient
    ``||d xi_k / d x_{L_k}||``, denominator the joint gradient at ``x_l``.
    ``pairwise``/``multipath``: per head ``k`` the weighted direct gradient
    ``||gamma_k d xi_k / d x_{L_k}||`` over ``||gamma_k d xi_k / d x_l||``,
    reported for the nearest downstream head. Both are measured with the
    same shared parameters (no inner updates).

    Batch statistics are used for normalization but running statistics and
    parameters are left untouched.
    """
    cache = N.forward(model, x, y, mode="train", update_stats=False)
    L_ = model.config.depth
    num, den = {}, {}
    if strategy == "plain":
        g = N.backward(model, cache, {model.K: 1.0}, keep_activation_grads=True)
        top = grad_norm(g.activations[L_])
        for l in range(1, L_ + 1):
            num[l], den[l] = top, grad_norm(g.activations[l])
    elif strategy == "joint":
        g = N.backward(model, cache, joint_weights(model), keep_activation_grads=True)
        direct = [grad_norm(N.head_backward(model, cache, k)[0]) for k in range(model.K + 1)]
        for l in range(1, L_ + 1):
            num[l], den[l] = direct[nearest_head(model, l)], grad_norm(g.activations[l])
    elif strategy in ("pairwise", "multipath"):
        lo = 0
        for k, h in enumerate(model.heads):
            g = N.backward(model, cache, {k: model.gamma[k]}, keep_activation_grads=True)
            top = grad_norm(g.heads[h.position])
            for l in range(lo + 1, h.position + 1):
                num[l], den[l] = top, grad_norm(g.activations[l])
            lo = h.position
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    layers, ratios, flagged = [], [], []
    for l in range(1, L_ + 1):
        if den[l] == 0.0:
            flagged.append(l)
            continue
        layers.append(l)
        ratios.append(num[l] / den[l])
    return RatioTrace(epoch, strategy, layers, ratios, flagged)


def metrics_header(num_heads):
    return (["epoch", "strategy", "lr"]
            + [f"train_loss_head_{k}" for k in range(1, num_heads + 1)]
            + [f"test_err_head_{k}" for k in range(1, num_heads + 1)]
            + ["seconds"])


def row_to_dict(row):
    """Flatten a :class:`~auxnet.training.EpochRow` into metrics columns."""
    d = {"epoch": row.epoch, "strategy": row.strategy, "lr": row.lr}
    for k, v in enumerate(row.train_loss, start=1):
        d[f"train_loss_head_{k}"] = v
    for k, v in enumerate(row.test_err, start=1):
        d[f"test_err_head_{k}"] = v
    d["seconds"] = row.seconds
    return d


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


class MetricsWriter:
    """Append-only metrics.csv. The whole file is rewritten atomically after
    every row, so a reader never sees a torn line."""

    def __init__(self, path, num_heads):
        self.path = path
        self.header = metrics_header(num_heads)
        self.rows = []

    def record_epoch(self, row):
        d = row if isinstance(row, dict) else row_to_dict(row)
        if list(d) != self.header:
            raise ValueError(f"metrics row columns {list(d)} do not match header {self.header}")
        self.rows.append([_fmt(d[c]) for c in self.header])
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header)
        w.writerows(self.rows)
        atomic_write(self.path, buf.getvalue())


RATIO_HEADER = ["epoch", "strategy", "layer", "ratio"]


def export_ratio_csv(traces, path, strategies=None):
    """One row per (epoch, strategy, layer)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RATIO_HEADER)
    for t in traces:
        if strategies is not None and t.strategy not in strategies:
            continue
        for l, r in zip(t.layers, t.ratios):
            w.writerow([t.epoch, t.strategy, l, repr(float(r))])
    atomic_write(path, buf.getvalue())


def read_ratio_csv(path):
    with open(path, newline="", encoding="utf-8") as f:
        r = csv.DictReader(f)
        if r.fieldnames != RATIO_HEADER:
            raise ValueError(f"unexpected ratio header {r.fieldnames}")
        return [(int(d["epoch"]), d["strategy"], int(d["layer"]), float(d["ratio"])) for d in r]
