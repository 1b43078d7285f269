"""Residual trunk with auxiliary classifier heads.

Layer ``l`` (1-based) maps ``x_{l-1}`` to ``x_l``. With post-activation
ordering::

    y_l = lam * S(x_{l-1}) + BN(conv(x_{l-1}))
    x_l = h(y_l)

where ``S`` is the identity, or a strided 1x1 projection at stage
transitions. Layer 1 is a stem without shortcut. Every head is global
average pooling followed by a fully connected layer, attached to ``x_p``
for its position ``p``; the last head sits at ``p == depth``.

Heads are indexed from 0 in code; files and reports number them from 1.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import layers as L


class ConfigError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    pass


@dataclass
class ModelConfig:
    depth: int
    head_positions: list
    stage_channels: list = field(default_factory=lambda: [16, 32, 64])
    stage_depths: list | None = None
    input_shape: list = field(default_factory=lambda: [3, 32, 32])
    num_classes: int = 10
    lam: float = 1.0
    nu: float = 2.0
    min_head_position: int = 10
    width_factor: int = 1
    kernel_size: int = 3
    stage_stride: int = 2
    ordering: str = "post"  # "post" | "pre"
    activation: str = "relu"  # "relu" | "identity"
    batchnorm: bool = True
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        self.head_positions = [int(p) for p in self.head_positions]
        self.stage_channels = [int(c) for c in self.stage_channels]
        self.input_shape = [int(d) for d in self.input_shape]
        if self.stage_depths is not None:
            self.stage_depths = [int(d) for d in self.stage_depths]
        self.validate()

    def validate(self):
        L_ = self.depth
        if not isinstance(L_, int) or L_ < 1:
            raise ConfigError(f"depth must be a positive integer, got {L_!r}")
        hp = self.head_positions
        if not hp:
            raise ConfigError("head_positions must contain at least the final layer")
        if any(b <= a for a, b in zip(hp, hp[1:])):
            raise ConfigError(f"head_positions must be strictly increasing, got {hp}")
        if hp[-1] != L_:
            if hp[-1] > L_:
                raise ConfigError(f"head position {hp[-1]} exceeds depth {L_}")
            raise ConfigError(f"last head position must equal depth {L_}, got {hp[-1]}")
        if hp[0] < 1:
            raise ConfigError(f"head positions must be >= 1, got {hp[0]}")
        if len(hp) > 1 and hp[0] < self.min_head_position:
            raise ConfigError(
                f"auxiliary head at layer {hp[0]} is below min_head_position={self.min_head_position}; "
                "outputs on very shallow layers tend to hurt training (lower min_head_position to force it)")
        if self.nu < 0:
            raise ConfigError(f"nu must be >= 0, got {self.nu}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.ordering not in ("post", "pre"):
            raise ConfigError(f"ordering must be 'post' or 'pre', got {self.ordering!r}")
        if self.activation not in ("relu", "identity"):
            raise ConfigError(f"activation must be 'relu' or 'identity', got {self.activation!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if len(self.input_shape) != 3:
            raise ConfigError(f"input_shape must be [C, H, W], got {self.input_shape}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be a positive odd integer")
        if self.width_factor < 1 or any(c < 1 for c in self.stage_channels):
            raise ConfigError("channel widths must be positive")
        self.resolved_stage_depths()

    def resolved_stage_depths(self):
        S = len(self.stage_channels)
        if self.stage_depths is not None:
            if len(self.stage_depths) != S or sum(self.stage_depths) != self.depth or min(self.stage_depths) < 1:
                raise ConfigError(
                    f"stage_depths {self.stage_depths} must have one positive entry per stage and sum to {self.depth}")
            return list(self.stage_depths)
        if self.depth < S:
            raise ConfigError(f"depth {self.depth} is smaller than the number of stages {S}")
        base, extra = divmod(self.depth, S)
        return [base + (1 if s < extra else 0) for s in range(S)]

    @property
    def num_heads(self):
        return len(self.head_positions)

    def to_dict(self):
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def head_weights(config):
    """Loss weight per head: ``max(0.01, (L_k / L)^nu)`` for auxiliary
    heads and exactly 1 for the final head."""
    if config.nu < 0:
        raise ConfigError(f"nu must be >= 0, got {config.nu}")
    L_ = config.head_positions[-1]
    gammas = [max(0.01, (p / L_) ** config.nu) for p in config.head_positions[:-1]]
    return gammas + [1.0]


@dataclass
class TrunkLayer:
    index: int
    conv: L.LayerParams
    bn: L.LayerParams | None
    proj: L.LayerParams | None
    shortcut: bool
    out_channels: int


@dataclass
class Head:
    position: int
    fc: L.LayerParams


class Model:
    """Parameter container. Arrays are mutated in place by the optimizer."""

    def __init__(self, config, layers, heads):
        self.config = config
        self.layers = layers
        self.heads = heads
        self.gamma = head_weights(config)

    @property
    def K(self):
        return len(self.heads) - 1

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def _named_params(self):
        for lay in self.layers:
            pre = f"layer{lay.index}"
            yield f"{pre}.conv", lay.conv
            if lay.bn is not None:
                yield f"{pre}.bn", lay.bn
            if lay.proj is not None:
                yield f"{pre}.proj", lay.proj
        for k, h in enumerate(self.heads):
            yield f"head{k + 1}.fc", h.fc

    def parameters(self):
        out = {}
        for name, p in self._named_params():
            for short, arr in p.arrays().items():
                out[f"{name}.{short}"] = arr
        return out

    def buffers(self):
        out = {}
        for name, p in self._named_params():
            if p.kind == "batchnorm":
                out[f"{name}.running_mean"] = p.running_mean
                out[f"{name}.running_var"] = p.running_var
        return out

    def state(self):
        return {**self.parameters(), **self.buffers()}

    def load_state(self, state):
        mine = self.state()
        missing, extra = set(mine) - set(state), set(state) - set(mine)
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, arr in mine.items():
            src = state[name]
            if src.shape != arr.shape:
                raise ValueError(f"{name}: shape {list(src.shape)} does not match model {list(arr.shape)}")
            arr[...] = src

    def path_names(self, k):
        """Names of the parameters that head ``k``'s loss depends on."""
        top = self.heads[k].position
        names = [n for n in self.parameters() if n.startswith("layer") and int(n[5:n.index(".")]) <= top]
        return names + [n for n in self.parameters() if n.startswith(f"head{k + 1}.")]

    def trunk_names(self):
        return [n for n in self.parameters() if n.startswith("layer")]

    def parameter_count(self):
        return int(sum(a.size for a in self.parameters().values()))

    def clone(self):
        return copy.deepcopy(self)


def _he(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def _bn(C, dtype):
    return L.LayerParams("batchnorm", np.ones(C, dtype), np.zeros(C, dtype),
                         running_mean=np.zeros(C, dtype), running_var=np.ones(C, dtype))


def layer_plan(config):
    """Per-layer ``(in_channels, out_channels, stride)``."""
    depths = config.resolved_stage_depths()
    chans = [c * config.width_factor for c in config.stage_channels]
    plan = []
    c_in = config.input_shape[0]
    for s, (d, c) in enumerate(zip(depths, chans)):
        for i in range(d):
            stride = config.stage_stride if (s > 0 and i == 0) else 1
            plan.append((c_in, c, stride))
            c_in = c
    return plan


def build_model(config):
    """Build a model with He-initialized weights; deterministic in ``config.seed``."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    dt = np.dtype(config.dtype)
    k = config.kernel_size
    layers = []
    for idx, (c_in, c_out, stride) in enumerate(layer_plan(config), start=1):
        conv = L.LayerParams("conv2d", _he(rng, (c_out, c_in, k, k), c_in * k * k, dt),
                             stride=stride, padding=k // 2)
        stem = idx == 1
        bn = None
        if config.batchnorm and not (stem and config.ordering == "pre"):
            bn = _bn(c_out if config.ordering == "post" else c_in, dt)
        proj = None
        if not stem and (c_in != c_out or stride != 1):
            proj = L.LayerParams("conv2d", _he(rng, (c_out, c_in, 1, 1), c_in, dt), stride=stride)
        layers.append(TrunkLayer(idx, conv, bn, proj, not stem, c_out))
    heads = []
    for p in config.head_positions:
        c = layers[p - 1].out_channels
        fc = L.LayerParams("fullyconnected", _he(rng, (config.num_classes, c), c, dt),
                           np.zeros(config.num_classes, dt))
        heads.append(Head(p, fc))
    return Model(config, layers, heads)


def truncate(model, k):
    """Standalone copy of the sub-network from the input up to head ``k``
    (0-based), carrying only that head."""
    if not 0 <= k <= model.K:
        raise IndexError(f"head index {k} out of range for a model with {model.K + 1} heads")
    cfg = model.config
    pos = model.heads[k].position
    depths = cfg.resolved_stage_depths()
    new_depths, new_chans, left = [], [], pos
    for d, c in zip(depths, cfg.stage_channels):
        if left <= 0:
            break
        new_depths.append(min(d, left))
        new_chans.append(c)
        left -= d
    new_cfg = ModelConfig.from_dict({**cfg.to_dict(), "depth": pos, "head_positions": [pos],
                                     "stage_depths": new_depths, "stage_channels": new_chans})
    layers = copy.deepcopy(model.layers[:pos])
    head = copy.deepcopy(model.heads[k])
    return Model(new_cfg, layers, [head])


@dataclass
class LayerCache:
    conv: L.ConvCache
    bn: L.BNCache | None
    proj: L.ConvCache | None
    pre_act: np.ndarray | None  # argument of the activation, for its mask


@dataclass
class ForwardCache:
    """Everything one forward pass produced. Arrays are read-only."""

    activations: list  # x_0 .. x_top
    layer_caches: list  # index l-1 for layer l
    pooled: list  # per head, None when not evaluated
    logits: list
    probs: list
    losses: list
    labels: np.ndarray | None
    mode: str

    @property
    def top(self):
        return len(self.activations) - 1


def _act(name, x):
    return L.relu_forward(x) if name == "relu" else x


def _act_back(name, pre, g):
    return L.relu_backward(pre, g) if name == "relu" else g


def _layer_forward(cfg, lay, x, mode, update_stats):
    conv_c = bn_c = proj_c = None
    if cfg.ordering == "post":
        z, conv_c = L.conv2d_forward(x, lay.conv)
        if lay.bn is not None:
            z, bn_c = L.batchnorm_forward(z, lay.bn, mode, update_stats)
        y = z
        if lay.shortcut:
            if lay.proj is not None:
                s, proj_c = L.conv2d_forward(x, lay.proj)
            else:
                s = x
            y = cfg.lam * s + z
        pre = y if cfg.activation == "relu" else None
        return _act(cfg.activation, y), LayerCache(conv_c, bn_c, proj_c, pre)
    a = x
    if lay.bn is not None:
        a, bn_c = L.batchnorm_forward(x, lay.bn, mode, update_stats)
    pre = None
    if lay.shortcut or lay.bn is not None:
        pre = a if cfg.activation == "relu" else None
        a = _act(cfg.activation, a)
    z, conv_c = L.conv2d_forward(a, lay.conv)
    if lay.shortcut:
        if lay.proj is not None:
            s, proj_c = L.conv2d_forward(x, lay.proj)
        else:
            s = x
        z = cfg.lam * s + z
    return z, LayerCache(conv_c, bn_c, proj_c, pre)


def forward(model, x, labels=None, mode="train", upto=None, heads=None, update_stats=True):
    """Run the trunk up to layer ``upto`` (default: the last layer) and
    evaluate the requested heads (default: every head at or below ``upto``)."""
    cfg = model.config
    if x.ndim != 4 or list(x.shape[1:]) != cfg.input_shape:
        raise L.ShapeError(f"batch shape {list(x.shape)} does not match input spec [B, {cfg.input_shape}]")
    x = np.ascontiguousarray(x, dtype=model.dtype)
    top = cfg.depth if upto is None else upto
    if heads is None:
        heads = [k for k, h in enumerate(model.heads) if h.position <= top]
    acts, lcaches = [x], []
    for lay in model.layers[:top]:
        x, lc = _layer_forward(cfg, lay, x, mode, update_stats)
        if not np.isfinite(x).all():
            raise DivergenceError(f"non-finite activation at layer {lay.index}")
        x.flags.writeable = False
        acts.append(x)
        lcaches.append(lc)
    n = len(model.heads)
    pooled, logits, probs, losses = [None] * n, [None] * n, [None] * n, [None] * n
    for k in heads:
        h = model.heads[k]
        if h.position > top:
            raise ValueError(f"head {k + 1} at layer {h.position} lies above the evaluated depth {top}")
        pooled[k] = L.global_avg_pool_forward(acts[h.position])
        logits[k] = L.fc_forward(pooled[k], h.fc)
        if labels is not None:
            losses[k], probs[k] = L.softmax_xent_forward(logits[k], labels)
            if not np.isfinite(losses[k]):
                raise DivergenceError(f"non-finite loss at head {k + 1}")
        else:
            probs[k] = L.softmax(logits[k])
    return ForwardCache(acts, lcaches, pooled, logits, probs, losses,
                        None if labels is None else np.asarray(labels), mode)


@dataclass
class Gradients:
    params: dict
    activations: dict  # layer index -> gradient w.r.t. x_l, when requested
    heads: dict  # layer index -> direct head contribution at x_l, when requested


def _layer_backward(cfg, lay, lc, g, grads, need_input):
    pre = f"layer{lay.index}"
    if cfg.ordering == "post":
        dy = _act_back(cfg.activation, lc.pre_act, g)
        dz = dy
        if lay.bn is not None:
            dz, bg = L.batchnorm_backward(lc.bn, dy)
            grads[f"{pre}.bn.weight"], grads[f"{pre}.bn.bias"] = bg["weight"], bg["bias"]
        dx, cg = L.conv2d_backward(lc.conv, dz, need_input_grad=need_input)
        grads[f"{pre}.conv.weight"] = cg["weight"]
        skip_grad = dy
    else:
        da, cg = L.conv2d_backward(lc.conv, g, need_input_grad=need_input or lay.bn is not None)
        grads[f"{pre}.conv.weight"] = cg["weight"]
        dx = da
        if lc.pre_act is not None:
            da = _act_back(cfg.activation, lc.pre_act, da)
            dx = da
        if lay.bn is not None:
            dx, bg = L.batchnorm_backward(lc.bn, da)
            grads[f"{pre}.bn.weight"], grads[f"{pre}.bn.bias"] = bg["weight"], bg["bias"]
        skip_grad = g
    if lay.shortcut:
        ds = cfg.lam * skip_grad
        if lay.proj is not None:
            dxs, pg = L.conv2d_backward(lc.proj, ds, need_input_grad=need_input)
            grads[f"{pre}.proj.weight"] = pg["weight"]
        else:
            dxs = ds
        if need_input:
            dx = dx + dxs
    return dx


def head_backward(model, cache, k, scale=1.0):
    """Gradient of ``scale * loss_k`` w.r.t. the head's input ``x_{L_k}``
    (not including any path through deeper layers), plus the head's
    parameter gradients."""
    h = model.heads[k]
    dlogits = L.softmax_xent_backward(cache.probs[k], cache.labels, scale=scale)
    dpool, hg = L.fc_backward(cache.pooled[k], h.fc, dlogits)
    return L.global_avg_pool_backward(cache.activations[h.position].shape, dpool), hg


def backward(model, cache, weights, keep_activation_grads=False, input_grad=False):
    """Backpropagate ``sum_k weights[k] * loss_k`` through ``cache``.

    Only layers at or below the deepest weighted head are visited, and only
    weighted heads receive gradients. Weights are taken from the model's
    current arrays while features come from the cache, so a cache can be
    replayed after the parameters moved.
    """
    cfg = model.config
    if cache.labels is None:
        raise ValueError("cache was produced without labels")
    for k in weights:
        if cache.probs[k] is None:
            raise ValueError(f"head {k + 1} was not evaluated in this cache")
    top = max(model.heads[k].position for k in weights)
    at = {model.heads[k].position: k for k in weights}
    grads, act_grads, head_grads = {}, {}, {}
    g = None
    for l in range(top, 0, -1):
        if l in at:
            k = at[l]
            dx, hg = head_backward(model, cache, k, weights[k])
            grads[f"head{k + 1}.fc.weight"], grads[f"head{k + 1}.fc.bias"] = hg["weight"], hg["bias"]
            if keep_activation_grads:
                head_grads[l] = dx
            g = dx if g is None else g + dx
        if keep_activation_grads:
            act_grads[l] = g
        g = _layer_backward(cfg, model.layers[l - 1], cache.layer_caches[l - 1], g, grads,
                            need_input=l > 1 or input_grad)
    if input_grad:
        act_grads[0] = g
    return Gradients(grads, act_grads, head_grads)
