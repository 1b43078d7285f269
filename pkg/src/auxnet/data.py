"""Dataset ingestion: IDX files, CIFAR-10 binary batches, synthetic sets.

Loaders return ``(x, y)`` with ``x`` shaped ``[N, C, H, W]`` (float64
before the model casts it) and integer labels ``y``.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field, fields

import numpy as np

from ._io import atomic_write


class DataFormatError(ValueError):
    pass


_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {np.dtype(v).newbyteorder("=").str[1:]: k for k, v in _IDX_TYPES.items()}


def read_idx(path):
    """Parse an IDX file into an ndarray with its stored dtype."""
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 4:
        raise DataFormatError(f"{path}: truncated header at byte offset {len(buf)}")
    if buf[0] != 0 or buf[1] != 0 or buf[2] not in _IDX_TYPES:
        raise DataFormatError(f"{path}: bad IDX magic {buf[:4].hex()} at byte offset 0")
    dt, rank = _IDX_TYPES[buf[2]], buf[3]
    hdr = 4 + 4 * rank
    if len(buf) < hdr:
        raise DataFormatError(f"{path}: truncated dimension list at byte offset {len(buf)}")
    dims = struct.unpack(f">{rank}I", buf[4:hdr])
    count = 1
    for d in dims:
        count *= d
    need = hdr + count * dt.itemsize
    if count * dt.itemsize > len(buf):
        raise DataFormatError(f"{path}: dimensions {list(dims)} overflow the file size {len(buf)} "
                              f"(declared at byte offset 4)")
    if len(buf) < need:
        raise DataFormatError(f"{path}: truncated data at byte offset {len(buf)}, expected {need} bytes")
    if len(buf) > need:
        raise DataFormatError(f"{path}: {len(buf) - need} trailing bytes after byte offset {need}")
    return np.frombuffer(buf, dtype=dt, count=count, offset=hdr).reshape(dims)


def idx_bytes(arr):
    arr = np.asarray(arr)
    key = arr.dtype.newbyteorder("=").str[1:]
    if key not in _IDX_CODES:
        raise DataFormatError(f"dtype {arr.dtype} has no IDX type code")
    code = _IDX_CODES[key]
    head = bytes([0, 0, code, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return head + arr.astype(_IDX_TYPES[code]).tobytes()


def write_idx(path, arr):
    atomic_write(path, idx_bytes(arr))


def _as_images(a):
    if a.ndim == 2:  # [N, D] -> fully connected input
        return a.reshape(a.shape[0], a.shape[1], 1, 1)
    if a.ndim == 3:
        return a[:, None, :, :]
    if a.ndim == 4:
        return a
    raise DataFormatError(f"IDX images must have rank 2, 3 or 4, got {a.ndim}")


def load_idx(images_path, labels_path):
    x = _as_images(read_idx(images_path))
    y = read_idx(labels_path)
    if y.ndim != 1 or len(y) != len(x):
        raise DataFormatError(f"labels {list(y.shape)} do not match {len(x)} images")
    return x.astype(np.float64), y.astype(np.int64)


CIFAR_RECORD = 3073


def load_cifar10_binary(path):
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) == 0 or len(buf) % CIFAR_RECORD:
        raise DataFormatError(f"{path}: length {len(buf)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    y = rec[:, 0].astype(np.int64)
    if y.max() > 9:
        raise DataFormatError(f"{path}: label byte {int(y.max())} outside 0-9")
    x = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64)
    return x, y


# -- synthetic ----------------------------------------------------------------

def _spiral(rng, n_per, classes, noise, turns):
    xs, ys = [], []
    for c in range(classes):
        t = np.sort(rng.uniform(0.05, 1.0, n_per))
        theta = 2 * np.pi * (c / classes + turns * t)
        pts = np.stack([t * np.cos(theta), t * np.sin(theta)], axis=1)
        xs.append(pts + noise * rng.standard_normal(pts.shape))
        ys.append(np.full(n_per, c))
    return np.concatenate(xs), np.concatenate(ys)


def _gaussians(rng, n_per, classes, noise, separation):
    xs, ys = [], []
    for c in range(classes):
        a = 2 * np.pi * c / classes
        mu = separation * np.array([np.cos(a), np.sin(a)])
        xs.append(mu + noise * rng.standard_normal((n_per, 2)))
        ys.append(np.full(n_per, c))
    return np.concatenate(xs), np.concatenate(ys)


def lift_to_grid(pts, size, extent=1.3, width=None):
    """Render each 2-D point as a Gaussian bump on a ``size x size`` grid."""
    width = width or 2 * extent / size
    ax = np.linspace(-extent, extent, size)
    gy, gx = np.meshgrid(ax, ax, indexing="ij")
    d2 = (pts[:, 0, None, None] - gx) ** 2 + (pts[:, 1, None, None] - gy) ** 2
    return np.exp(-d2 / (2 * width ** 2))[:, None]


@dataclass
class DataSpec:
    source: str = "synthetic"  # synthetic | idx | cifar10-binary
    generator: str = "spiral"  # spiral | gaussians
    samples: int = 2000
    classes: int = 3
    noise: float = 0.1
    turns: float = 1.0
    separation: float = 4.0
    lift: str = "flat"  # flat -> [N, 2, 1, 1]; grid -> [N, 1, G, G]
    grid_size: int = 8
    test_fraction: float = 0.25
    seed: int = 0
    normalization: str = "standardize"  # standardize | scale255 | none
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    train_files: list = field(default_factory=list)
    test_files: list = field(default_factory=list)
    mean: list | None = None  # per-channel standardization stats; filled from
    std: list | None = None  # the training split when left unset

    def __post_init__(self):
        if self.source not in ("synthetic", "idx", "cifar10-binary"):
            raise ValueError(f"unknown data source {self.source!r}")
        if self.normalization not in ("standardize", "scale255", "none"):
            raise ValueError(f"unknown normalization {self.normalization!r}")
        if self.source == "synthetic":
            if self.generator not in ("spiral", "gaussians"):
                raise ValueError(f"unknown generator {self.generator!r}")
            if self.classes < 2:
                raise ValueError("synthetic data needs at least 2 classes")
            if self.samples // self.classes < 2:
                raise ValueError("synthetic data needs at least 2 samples per class")
            if not 0.0 <= self.test_fraction < 1.0:
                raise ValueError("test_fraction must lie in [0, 1)")
            if self.lift not in ("flat", "grid"):
                raise ValueError(f"unknown lift {self.lift!r}")

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown data config keys: {sorted(unknown)}")
        return cls(**d)

    def input_shape(self):
        if self.source == "cifar10-binary":
            return [3, 32, 32]
        if self.source == "synthetic":
            return [2, 1, 1] if self.lift == "flat" else [1, self.grid_size, self.grid_size]
        return None  # known only after reading the files


def gen_synthetic(spec):
    """Class-balanced synthetic set split into disjoint train/test parts."""
    rng = np.random.default_rng(spec.seed)
    n_per = spec.samples // spec.classes
    if spec.generator == "spiral":
        pts, y = _spiral(rng, n_per, spec.classes, spec.noise, spec.turns)
    else:
        pts, y = _gaussians(rng, n_per, spec.classes, spec.noise, spec.separation)
    perm = rng.permutation(len(y))
    pts, y = pts[perm], y[perm]
    if spec.lift == "flat":
        x = pts[:, :, None, None]
    else:
        x = lift_to_grid(pts, spec.grid_size)
    n_test = int(round(spec.test_fraction * len(y)))
    n_train = len(y) - n_test
    return (x[:n_train], y[:n_train].astype(np.int64)), (x[n_train:], y[n_train:].astype(np.int64))


def channel_stats(x):
    """Per-channel mean and standard deviation (zero std replaced by 1)."""
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    return [float(m) for m in mean], [float(s) if s > 0 else 1.0 for s in std]


def apply_normalization(x, how, mean=None, std=None):
    if how == "none":
        return x
    if how == "scale255":
        return x / 255.0
    if mean is None or std is None:
        raise ValueError("standardize needs mean and std")
    if len(mean) != x.shape[1] or len(std) != x.shape[1]:
        raise ValueError(f"normalization stats have {len(mean)} channels, data has {x.shape[1]}")
    m = np.asarray(mean, dtype=np.float64)[None, :, None, None]
    s = np.asarray(std, dtype=np.float64)[None, :, None, None]
    return (x - m) / s


def load_raw(spec, base_dir="."):
    """Unnormalized ``((x_train, y_train), (x_test, y_test))``."""
    def p(path):
        return path if os.path.isabs(path) else os.path.join(base_dir, path)

    if spec.source == "synthetic":
        train, test = gen_synthetic(spec)
    elif spec.source == "idx":
        if not (spec.train_images and spec.train_labels and spec.test_images and spec.test_labels):
            raise ValueError("idx source needs train_images, train_labels, test_images, test_labels")
        train = load_idx(p(spec.train_images), p(spec.train_labels))
        test = load_idx(p(spec.test_images), p(spec.test_labels))
    else:
        if not spec.train_files or not spec.test_files:
            raise ValueError("cifar10-binary source needs train_files and test_files")
        parts = [load_cifar10_binary(p(f)) for f in spec.train_files]
        train = (np.concatenate([a for a, _ in parts]), np.concatenate([b for _, b in parts]))
        parts = [load_cifar10_binary(p(f)) for f in spec.test_files]
        test = (np.concatenate([a for a, _ in parts]), np.concatenate([b for _, b in parts]))
    return train, test


def load_dataset(spec, base_dir="."):
    """Normalized ``((x_train, y_train), (x_test, y_test))`` per ``spec``.

    Standardization stats missing from ``spec`` are computed on the
    training split and written back into it.
    """
    train, test = load_raw(spec, base_dir)
    if spec.normalization == "standardize" and (spec.mean is None or spec.std is None):
        spec.mean, spec.std = channel_stats(train[0])
    def norm(x):
        return apply_normalization(x, spec.normalization, spec.mean, spec.std)
    return (norm(train[0]), train[1]), (norm(test[0]), test[1])


def load_files(path, labels_path=None):
    """Load an IDX image file (labels optional) or a CIFAR-10 ``.bin`` batch.

    Returns ``(x, y)`` with ``y`` None when no labels are available.
    """
    if path.endswith(".bin"):
        return load_cifar10_binary(path)
    x = _as_images(read_idx(path)).astype(np.float64)
    if labels_path is None:
        labels_path = guess_labels_path(path)
    if labels_path is None:
        return x, None
    y = read_idx(labels_path)
    if y.ndim != 1 or len(y) != len(x):
        raise DataFormatError(f"labels {list(y.shape)} do not match {len(x)} images")
    return x, y.astype(np.int64)


def guess_labels_path(path):
    """Find a sibling label file: ``*images*`` -> ``*labels*`` (``idx3`` ->
    ``idx1``), or ``name.ext`` -> ``name-labels.ext`` / ``name.labels.ext``."""
    d, base = os.path.split(path)
    stem, ext = os.path.splitext(base)
    cands = [stem + "-labels" + ext, stem + ".labels" + ext, stem + "_labels" + ext]
    if "images" in base:
        cands.insert(0, base.replace("images", "labels").replace("idx3", "idx1").replace("idx4", "idx1"))
    for c in cands:
        full = os.path.join(d, c)
        if full != path and os.path.exists(full):
            return full
    return None
