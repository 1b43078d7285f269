"""Finite-difference certification of every backward kernel.

Each registered kernel is reduced to a scalar ``sum(out * R)`` with a fixed
random projection ``R``; the analytic gradient of that scalar is compared
with central differences on every input and parameter element. All checks
run in float64.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from . import layers as L

STEP = 1e-5


@dataclass
class GradCheckReport:
    kernel: str
    shape: dict
    max_rel_error: float
    tolerance: float
    error: str | None = None  # set when the check itself raised

    @property
    def passed(self):
        return self.error is None and bool(self.max_rel_error < self.tolerance)


def relative_error(analytic, numeric):
    """Elementwise ``|a - n| / max(|a|, |n|)`` with a floor at 1e-6 of the
    largest gradient magnitude, so entries that are numerically zero do not
    dominate the maximum."""
    a = np.concatenate([v.ravel() for v in analytic])
    n = np.concatenate([v.ravel() for v in numeric])
    scale = max(np.abs(n).max(initial=0.0), np.abs(a).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6 * scale)
    return float((np.abs(a - n) / denom).max())


def numeric_grad(f, arrays, step=STEP):
    """Central differences of scalar ``f()`` w.r.t. each array, perturbed in place."""
    out = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f()
            flat[i] = orig - step
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * step)
        out.append(g)
    return out


# Each case builder returns (arrays, loss_fn, analytic_fn): loss_fn() reads the
# arrays in place, analytic_fn() returns gradients aligned with ``arrays``.

def _conv_case(rng, spec):
    B, C, H, W = spec["input"]
    O, k = spec.get("out_channels", 3), spec.get("k", 3)
    x = rng.standard_normal((B, C, H, W))
    p = L.LayerParams("conv2d", rng.standard_normal((O, C, k, k)), rng.standard_normal(O),
                      stride=spec.get("stride", 1), padding=spec.get("padding", 1))
    out, _ = L.conv2d_forward(x, p)
    R = rng.standard_normal(out.shape)

    def loss():
        return float((L.conv2d_forward(x, p, need_cache=False)[0] * R).sum())

    def analytic():
        _, cache = L.conv2d_forward(x, p)
        dx, g = L.conv2d_backward(cache, R)
        return [dx, g["weight"], g["bias"]]

    return [x, p.weight, p.bias], loss, analytic


def _bn_case(rng, spec, mode):
    shape = spec["input"]
    C = shape[1]
    x = rng.standard_normal(shape) * 2.0 + 0.5
    p = L.LayerParams("batchnorm", rng.standard_normal(C), rng.standard_normal(C),
                      running_mean=rng.standard_normal(C), running_var=rng.uniform(0.5, 2.0, C))
    R = rng.standard_normal(shape)

    def loss():
        return float((L.batchnorm_forward(x, p, mode, update_stats=False)[0] * R).sum())

    def analytic():
        _, cache = L.batchnorm_forward(x, p, mode, update_stats=False)
        dx, g = L.batchnorm_backward(cache, R)
        return [dx, g["weight"], g["bias"]]

    return [x, p.weight, p.bias], loss, analytic


def _relu_case(rng, spec):
    x = rng.standard_normal(spec["input"])
    # keep clear of the kink so central differences are exact
    x = np.where(np.abs(x) < 1e-3, 0.5, x)
    R = rng.standard_normal(x.shape)

    def loss():
        return float((L.relu_forward(x) * R).sum())

    def analytic():
        return [L.relu_backward(x, R)]

    return [x], loss, analytic


def _fc_case(rng, spec):
    B, D = spec["input"]
    O = spec.get("out_features", 2)
    x = rng.standard_normal((B, D))
    p = L.LayerParams("fullyconnected", rng.standard_normal((O, D)), rng.standard_normal(O))
    R = rng.standard_normal((B, O))

    def loss():
        return float((L.fc_forward(x, p) * R).sum())

    def analytic():
        dx, g = L.fc_backward(x, p, R)
        return [dx, g["weight"], g["bias"]]

    return [x, p.weight, p.bias], loss, analytic


def _gap_case(rng, spec):
    x = rng.standard_normal(spec["input"])
    R = rng.standard_normal(x.shape[:2])

    def loss():
        return float((L.global_avg_pool_forward(x) * R).sum())

    def analytic():
        return [L.global_avg_pool_backward(x.shape, R)]

    return [x], loss, analytic


def _xent_case(rng, spec):
    B, C = spec["input"]
    z = rng.standard_normal((B, C)) * 2.0
    y = rng.integers(0, C, B)

    def loss():
        return L.softmax_xent_forward(z, y)[0]

    def analytic():
        _, probs = L.softmax_xent_forward(z, y)
        return [L.softmax_xent_backward(probs, y)]

    return [z], loss, analytic


def _random_spec(kernel, rng):
    r = lambda lo, hi: int(rng.integers(lo, hi + 1))  # noqa: E731
    if kernel == "conv2d":
        k = r(1, 3)
        return {"input": (r(1, 3), r(1, 3), r(k, 6), r(k, 6)), "out_channels": r(1, 3), "k": k,
                "stride": r(1, 2), "padding": r(0, k // 2 + 1)}
    if kernel in ("batchnorm_train", "batchnorm_eval"):
        if rng.random() < 0.5:
            # batch 2 on [B, C] normalizes to +-1 whatever the input, so the
            # input gradient is identically zero and a relative error is noise
            return {"input": (r(3, 5), r(1, 4))}
        return {"input": (r(2, 4), r(1, 3), r(1, 3), r(1, 3))}
    if kernel == "relu":
        return {"input": (r(1, 3), r(1, 3), r(1, 4), r(1, 4))}
    if kernel == "fullyconnected":
        return {"input": (r(1, 4), r(1, 5)), "out_features": r(1, 4)}
    if kernel == "global_avg_pool":
        return {"input": (r(1, 3), r(1, 3), r(1, 4), r(1, 4))}
    if kernel == "softmax_xent":
        return {"input": (r(1, 5), r(2, 6))}
    raise KeyError(kernel)


KERNELS = {
    "conv2d": _conv_case,
    "batchnorm_train": lambda rng, spec: _bn_case(rng, spec, "train"),
    "batchnorm_eval": lambda rng, spec: _bn_case(rng, spec, "eval"),
    "relu": _relu_case,
    "fullyconnected": _fc_case,
    "global_avg_pool": _gap_case,
    "softmax_xent": _xent_case,
}


def grad_check(kernel, input_spec, tolerance=1e-5, seed=0):
    """Compare one kernel's analytic backward with central differences.

    Failures are reported through the returned object, never raised.
    """
    rng = np.random.default_rng(seed)
    try:
        arrays, loss, analytic = KERNELS[kernel](rng, dict(input_spec))
        a = analytic()
        n = numeric_grad(loss, arrays)
        err = relative_error(a, n)
    except Exception as e:  # noqa: BLE001 - reported, not raised
        return GradCheckReport(kernel, dict(input_spec), float("inf"), tolerance, f"{type(e).__name__}: {e}")
    return GradCheckReport(kernel, dict(input_spec), err, tolerance)


def certify(n_shapes=20, tolerance=1e-5, seed=0, kernels=None):
    """Run ``grad_check`` on ``n_shapes`` random shapes for each kernel."""
    reports = []
    for name in kernels or KERNELS:
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        for i in range(n_shapes):
            spec = _random_spec(name, rng)
            reports.append(grad_check(name, spec, tolerance, seed=[seed, i]))
    return reports
