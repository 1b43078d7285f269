"""Prediction with every head of a multi-head model.

The *safe* prediction picks, per sample, the head whose softmax output has
the lowest entropy and reports that head's argmax class. Ties go to the
deepest head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import network as N


def entropy(probs, axis=-1):
    """Natural-log entropy ``-sum(p * log p)`` with ``0 log 0 = 0``.

    Works on a single vector or along ``axis`` of a stack of vectors.
    """
    p = np.asarray(probs, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("probabilities must be non-negative")
    if np.any(np.abs(p.sum(axis=axis) - 1.0) > 1e-6):
        raise ValueError("probabilities must sum to 1 (within 1e-6)")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    h = -terms.sum(axis=axis)
    return np.clip(h, 0.0, np.log(p.shape[axis]))


def select_head(entropies, mode="safe", threshold=None):
    """Chosen head per sample from an ``[H, B]`` entropy table.

    ``safe``: minimum entropy, ties to the deepest head. ``final``: always
    the last head. ``threshold``: the shallowest head whose entropy is at
    or below ``threshold``, else the last head (early exit).
    """
    H = entropies.shape[0]
    if mode == "safe":
        return H - 1 - np.argmin(entropies[::-1], axis=0)
    if mode == "final":
        return np.full(entropies.shape[1], H - 1)
    if mode == "threshold":
        if threshold is None:
            raise ValueError("threshold mode needs a threshold")
        ok = entropies <= threshold
        return np.where(ok.any(axis=0), np.argmax(ok, axis=0), H - 1)
    raise ValueError(f"unknown selection mode {mode!r}")


@dataclass
class Prediction:
    """One sample's view across all heads."""

    sample_id: int
    probs: list
    entropies: list
    head_classes: list
    chosen_head: int  # 0-based
    chosen_class: int

    def to_json_dict(self):
        return {
            "sample_id": int(self.sample_id),
            "per_head": [{"head": k + 1, "class": int(c), "entropy": float(h)}
                         for k, (c, h) in enumerate(zip(self.head_classes, self.entropies))],
            "chosen_head": int(self.chosen_head) + 1,
            "chosen_class": int(self.chosen_class),
        }


@dataclass
class BatchPrediction:
    probs: np.ndarray  # [H, B, C]
    entropies: np.ndarray  # [H, B]
    head_classes: np.ndarray  # [H, B]
    chosen_head: np.ndarray  # [B]
    chosen_class: np.ndarray  # [B]

    def __len__(self):
        return self.chosen_head.shape[0]

    def samples(self, offset=0):
        for i in range(len(self)):
            yield Prediction(offset + i, list(self.probs[:, i]), list(self.entropies[:, i]),
                             list(self.head_classes[:, i]), int(self.chosen_head[i]), int(self.chosen_class[i]))


def head_probs(model, x, batch_size=512):
    """Eval-mode softmax outputs of every head, shape ``[H, B, C]``."""
    out = []
    for i in range(0, len(x), batch_size):
        cache = N.forward(model, x[i:i + batch_size], mode="eval")
        out.append(np.stack(cache.probs))
    return np.concatenate(out, axis=1)


def predictions_from_probs(probs, mode="safe", threshold=None):
    ent = entropy(probs, axis=-1)
    classes = probs.argmax(axis=-1)
    chosen = select_head(ent, mode, threshold)
    return BatchPrediction(probs, ent, classes, chosen, classes[chosen, np.arange(probs.shape[1])])


def safe_predict(model, x, mode="safe", threshold=None, batch_size=512):
    return predictions_from_probs(head_probs(model, x, batch_size), mode, threshold)


def prediction_ratio(chosen_heads, num_heads):
    """Percentage of samples won by each head."""
    chosen = np.asarray(chosen_heads)
    if chosen.size == 0:
        raise ValueError("prediction_ratio needs at least one prediction")
    counts = np.bincount(chosen, minlength=num_heads)
    return [float(100.0 * c / chosen.size) for c in counts]


@dataclass
class HeadEvaluation:
    head_errors: list  # percent, per head
    safe_error: float
    prediction_ratio: list

    @property
    def final_error(self):
        return self.head_errors[-1]


def evaluate_heads(model, x, y, batch_size=512):
    """Per-head test error (percent) plus the safe-prediction error."""
    y = np.asarray(y)
    pred = safe_predict(model, x, batch_size=batch_size)
    errs = [float(100.0 * np.mean(c != y)) for c in pred.head_classes]
    safe = float(100.0 * np.mean(pred.chosen_class != y))
    return HeadEvaluation(errs, safe, prediction_ratio(pred.chosen_head, model.K + 1))
