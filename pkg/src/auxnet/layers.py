"""Forward and backward kernels for the fixed layer zoo.

Every kernel takes plain numpy arrays in NCHW (or NC) layout and returns
new arrays; nothing is broadcast implicitly, and shape mismatches raise
:class:`ShapeError`. Forward kernels that need state for the backward pass
return a cache object alongside their output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _backend

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class ShapeError(ValueError):
    pass


class StaleCacheError(ValueError):
    pass


@dataclass
class LayerParams:
    kind: str  # "conv2d" | "batchnorm" | "fullyconnected"
    weight: np.ndarray
    bias: np.ndarray | None = None
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    stride: int = 1
    padding: int = 0
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    def __post_init__(self):
        if self.kind == "conv2d":
            if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
                raise ShapeError(f"conv2d weight must be [out, in, k, k], got {list(self.weight.shape)}")
        elif self.kind == "batchnorm":
            if self.running_var is not None and np.any(self.running_var <= 0):
                raise ValueError("batchnorm running_var must be positive")
        elif self.kind != "fullyconnected":
            raise ValueError(f"unknown layer kind {self.kind!r}")

    @property
    def kernel_size(self):
        return self.weight.shape[2]

    def arrays(self):
        """Trainable arrays by short name."""
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out

    def copy(self):
        def cp(a):
            return None if a is None else a.copy()

        return LayerParams(self.kind, cp(self.weight), cp(self.bias), cp(self.running_mean),
                           cp(self.running_var), self.stride, self.padding, self.momentum, self.eps)


def _check(cond, msg):
    if not cond:
        raise ShapeError(msg)


# -- convolution -------------------------------------------------------------

@dataclass
class ConvCache:
    params: LayerParams
    input_shape: tuple
    output_shape: tuple
    weight_shape: tuple
    cols: np.ndarray


def conv_output_size(size, k, stride, pad):
    span = size + 2 * pad - k
    if span < 0:
        raise ShapeError(f"kernel {k} larger than padded input {size + 2 * pad}")
    return span // stride + 1


def conv2d_forward(x, params, need_cache=True):
    _check(x.ndim == 4, f"conv2d expects [B, C, H, W] input, got {list(x.shape)}")
    w = params.weight
    O, C, k, _ = w.shape
    _check(x.shape[1] == C, f"conv2d input has {x.shape[1]} channels, weight expects {C}")
    B, _, H, W = x.shape
    s, p = params.stride, params.padding
    Ho, Wo = conv_output_size(H, k, s, p), conv_output_size(W, k, s, p)
    if k == 1 and s == 1 and p == 0:
        cols = x.transpose(0, 2, 3, 1).reshape(B * H * W, C)
    else:
        cols = _backend.im2col(x, k, s, p)
    out = cols @ w.reshape(O, -1).T
    if params.bias is not None:
        out += params.bias
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))
    cache = ConvCache(params, x.shape, out.shape, w.shape, cols) if need_cache else None
    return out, cache


def conv2d_backward(cache, grad_out, need_input_grad=True):
    """Return ``(grad_input, {"weight": ..., "bias": ...})``.

    The weight used for the input gradient is the layer's *current* weight,
    so a cache may be reused after an in-place parameter update as long as
    shapes still agree.
    """
    params = cache.params
    w = params.weight
    if w.shape != cache.weight_shape:
        raise StaleCacheError(f"weight shape changed from {cache.weight_shape} to {w.shape}")
    if grad_out.shape != cache.output_shape:
        raise StaleCacheError(f"grad_out shape {grad_out.shape} does not match cached output {cache.output_shape}")
    O, C, k, _ = w.shape
    B, _, H, W = cache.input_shape
    g2 = grad_out.transpose(0, 2, 3, 1).reshape(-1, O)
    grads = {"weight": (g2.T @ cache.cols).reshape(w.shape)}
    if params.bias is not None:
        grads["bias"] = g2.sum(axis=0)
    if not need_input_grad:
        return None, grads
    dcols = g2 @ w.reshape(O, -1)
    s, p = params.stride, params.padding
    if k == 1 and s == 1 and p == 0:
        dx = np.ascontiguousarray(dcols.reshape(B, H, W, C).transpose(0, 3, 1, 2))
    else:
        dx = _backend.col2im(dcols, cache.input_shape, k, s, p)
    return dx, grads


def conv2d_naive(x, weight, bias=None, stride=1, padding=0):
    """Direct six-loop convolution; slow, used as an oracle."""
    B, C, H, W = x.shape
    O, C2, k, _ = weight.shape
    _check(C == C2, "channel mismatch")
    Ho, Wo = conv_output_size(H, k, stride, padding), conv_output_size(W, k, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((B, O, Ho, Wo), dtype=x.dtype)
    for b in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0
                    for c in range(C):
                        for di in range(k):
                            for dj in range(k):
                                acc += xp[b, c, i * stride + di, j * stride + dj] * weight[o, c, di, dj]
                    out[b, o, i, j] = acc + (bias[o] if bias is not None else 0.0)
    return out


# -- batch normalization -----------------------------------------------------

@dataclass
class BNCache:
    params: LayerParams
    mode: str
    x_hat: np.ndarray
    inv_std: np.ndarray
    shape: tuple


def _bn_axes(x):
    _check(x.ndim in (2, 4), f"batchnorm expects [B, C] or [B, C, H, W], got {list(x.shape)}")
    return (0,) if x.ndim == 2 else (0, 2, 3)


def _per_channel(v, ndim):
    return v.reshape(1, -1) if ndim == 2 else v.reshape(1, -1, 1, 1)


def batchnorm_forward(x, params, mode="train", update_stats=True):
    axes = _bn_axes(x)
    C = x.shape[1]
    _check(params.weight.shape == (C,), f"batchnorm has {params.weight.shape[0]} channels, input has {C}")
    if mode == "train":
        if x.shape[0] < 2:
            raise ValueError("batchnorm in train mode needs a batch of at least 2")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        if update_stats:
            n = x.size // C
            m = params.momentum
            params.running_mean *= m
            params.running_mean += (1 - m) * mean
            params.running_var *= m
            params.running_var += (1 - m) * var * (n / (n - 1))
    elif mode == "eval":
        mean, var = params.running_mean, params.running_var
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    inv_std = 1.0 / np.sqrt(var + params.eps)
    x_hat = (x - _per_channel(mean, x.ndim)) * _per_channel(inv_std, x.ndim)
    out = x_hat * _per_channel(params.weight, x.ndim) + _per_channel(params.bias, x.ndim)
    return out, BNCache(params, mode, x_hat, inv_std.astype(x.dtype, copy=False), x.shape)


def batchnorm_backward(cache, grad_out):
    params = cache.params
    if grad_out.shape != cache.shape:
        raise StaleCacheError(f"grad_out shape {grad_out.shape} does not match cached {cache.shape}")
    axes = _bn_axes(grad_out)
    nd = grad_out.ndim
    x_hat = cache.x_hat
    grads = {"weight": (grad_out * x_hat).sum(axis=axes), "bias": grad_out.sum(axis=axes)}
    dxhat = grad_out * _per_channel(params.weight, nd)
    inv = _per_channel(cache.inv_std, nd)
    if cache.mode == "eval":
        return dxhat * inv, grads
    n = grad_out.size // grad_out.shape[1]
    s1 = _per_channel(dxhat.sum(axis=axes), nd)
    s2 = _per_channel((dxhat * x_hat).sum(axis=axes), nd)
    dx = (inv / n) * (n * dxhat - s1 - x_hat * s2)
    return dx, grads


# -- elementwise, affine, pooling ---------------------------------------------

def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    _check(x.shape == grad_out.shape, "relu grad shape mismatch")
    return grad_out * (x > 0)


def fc_forward(x, params):
    _check(x.ndim == 2, f"fully connected expects [B, D] input, got {list(x.shape)}")
    w = params.weight
    _check(w.ndim == 2 and w.shape[1] == x.shape[1],
           f"fully connected weight {list(w.shape)} incompatible with input width {x.shape[1]}")
    out = x @ w.T
    if params.bias is not None:
        out = out + params.bias
    return out


def fc_backward(x, params, grad_out, need_input_grad=True):
    _check(grad_out.shape == (x.shape[0], params.weight.shape[0]), "fully connected grad shape mismatch")
    grads = {"weight": grad_out.T @ x}
    if params.bias is not None:
        grads["bias"] = grad_out.sum(axis=0)
    dx = grad_out @ params.weight if need_input_grad else None
    return dx, grads


def global_avg_pool_forward(x):
    _check(x.ndim == 4, f"global pooling expects [B, C, H, W], got {list(x.shape)}")
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(input_shape, grad_out):
    B, C, H, W = input_shape
    _check(grad_out.shape == (B, C), "global pooling grad shape mismatch")
    g = grad_out / (H * W)
    return np.ascontiguousarray(np.broadcast_to(g[:, :, None, None], input_shape))


# -- loss ---------------------------------------------------------------------

def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent_forward(logits, labels):
    """Mean cross-entropy over the batch; returns ``(loss, probs)``."""
    _check(logits.ndim == 2, "logits must be [B, C]")
    labels = np.asarray(labels)
    _check(labels.shape == (logits.shape[0],), "labels must be [B]")
    C = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"labels must lie in [0, {C})")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(len(labels)), labels].mean()
    return float(loss), np.exp(logp)


def softmax_xent_backward(probs, labels, scale=1.0):
    """Gradient of ``scale * mean xent`` with respect to the logits."""
    g = probs.copy()
    g[np.arange(len(labels)), labels] -= 1
    g *= scale / len(labels)
    return g

