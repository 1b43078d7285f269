"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"AUXN"
    u16   format version
    u32   config length, then that many bytes of UTF-8 JSON
    u32   tensor count
    per tensor:
        u32   name length, then UTF-8 name
        u8    rank
        u32   dims[rank]
        u8    element width in bytes (4 = float32, 8 = float64)
        raw little-endian element data
    u32   CRC32 of every preceding byte

The JSON document is either a bare model config or a full run config
(see :mod:`auxnet.config`); either one rebuilds the topology.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from . import network as N
from ._io import atomic_write

MAGIC = b"AUXN"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _model_config(doc):
    from . import config

    if config.is_run_document(doc):
        return config.model_config(doc)
    return N.ModelConfig.from_dict(doc)


def checkpoint_bytes(model, document=None):
    doc = document if document is not None else model.config.to_dict()
    cfg_bytes = json.dumps(doc, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(cfg_bytes)), cfg_bytes]
    state = model.state()
    parts.append(struct.pack("<I", len(state)))
    for name, arr in state.items():
        nb = name.encode("utf-8")
        width = arr.dtype.itemsize
        if arr.dtype not in (np.float32, np.float64):
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        parts += [struct.pack("<I", len(nb)), nb, struct.pack("<B", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), struct.pack("<B", width),
                  np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(model, path, document=None):
    """Write atomically. ``document`` (e.g. the resolved run config) is
    embedded instead of the bare model config when given."""
    atomic_write(path, checkpoint_bytes(model, document))


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint while reading {what} at byte offset {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def parse_checkpoint(buf):
    """Return ``(document, {name: array})`` after validating magic, version and CRC."""
    if len(buf) < 10 or buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic at byte offset 0")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    actual = zlib.crc32(body) & 0xFFFFFFFF
    if crc != actual:
        raise CheckpointError(f"CRC mismatch: stored {crc:#010x}, computed {actual:#010x}")
    r = _Reader(body)
    r.take(4, "magic")
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (this build reads version {VERSION})")
    (n,) = r.unpack("<I", "config length")
    try:
        doc = json.loads(r.take(n, "config").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"embedded config is not valid JSON: {e}") from e
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        (ln,) = r.unpack("<I", "name length")
        name = r.take(ln, "tensor name").decode("utf-8")
        (rank,) = r.unpack("<B", f"{name} rank")
        dims = r.unpack(f"<{rank}I", f"{name} dims")
        (width,) = r.unpack("<B", f"{name} element width")
        if width not in (4, 8):
            raise CheckpointError(f"{name}: unsupported element width {width}")
        dt = np.dtype("<f4" if width == 4 else "<f8")
        size = int(np.prod(dims, dtype=np.int64)) * width
        data = r.take(size, f"{name} data")
        tensors[name] = np.frombuffer(data, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    if r.pos != len(body):
        raise CheckpointError(f"{len(body) - r.pos} unexpected bytes after the last tensor")
    return doc, tensors


def load_checkpoint(path, with_document=False):
    """Rebuild the model from its embedded config and load every tensor bitwise."""
    with open(path, "rb") as f:
        buf = f.read()
    doc, tensors = parse_checkpoint(buf)
    try:
        cfg = _model_config(doc)
    except (TypeError, ValueError, KeyError, AttributeError) as e:
        raise CheckpointError(f"embedded model config is invalid: {e}") from e
    model = N.build_model(cfg)
    mine = model.state()
    missing, extra = set(mine) - set(tensors), set(tensors) - set(mine)
    if missing or extra:
        raise CheckpointError(f"tensors do not match config topology: missing {sorted(missing)}, "
                              f"unexpected {sorted(extra)}")
    for name, arr in mine.items():
        t = tensors[name]
        if t.shape != arr.shape:
            raise CheckpointError(f"{name}: stored shape {list(t.shape)} but config implies {list(arr.shape)}")
        if t.dtype != arr.dtype:
            raise CheckpointError(f"{name}: stored {t.dtype} but config dtype is {arr.dtype}")
        arr[...] = t
    return (model, doc) if with_document else model
