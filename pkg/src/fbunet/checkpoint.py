"""Binary checkpoint format.

Layout, all integers little-endian ``uint32``::

    b"FBUNCKPT"                      magic
    version                          currently 1
    meta_len, meta (UTF-8 JSON)      model config, epoch, RNG state, Adam step
                                     counts, free-form extras (sorted keys)
    entry_count
    entry_count x:
        name_len, name (UTF-8)
        ndim, dims[ndim]
        float32 little-endian values, row-major

Entry names are ``param/<path>``, ``buffer/<path>``, ``adam_m/<path>`` and
``adam_v/<path>``. Serialization is deterministic, so save -> load -> save is
byte-identical.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .models import Model, ModelConfig, build_model

MAGIC = b"FBUNCKPT"
VERSION = 1


def _u32(v):
    return struct.pack("<I", v)


def _write_blob(fh, data: bytes):
    fh.write(_u32(len(data)))
    fh.write(data)


def model_entries(model: Model, optimizer=True):
    entries = []
    params = list(model.named_parameters())
    entries += [(f"param/{n}", p.data) for n, p in params]
    entries += [(f"buffer/{n}", b) for n, b in model.named_buffers()]
    if optimizer:
        entries += [(f"adam_m/{n}", p.m) for n, p in params]
        entries += [(f"adam_v/{n}", p.v) for n, p in params]
    return entries


def dumps(model: Model, epoch=0, rng_state=None, extra=None) -> bytes:
    meta = {
        "config": model.config.to_dict(),
        "epoch": int(epoch),
        "rng_state": rng_state,
        "adam_steps": {n: p.step_count for n, p in model.named_parameters()},
        "extra": extra or {},
    }
    fh = io.BytesIO()
    fh.write(MAGIC)
    fh.write(_u32(VERSION))
    _write_blob(fh, json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8"))
    entries = model_entries(model)
    fh.write(_u32(len(entries)))
    for name, arr in entries:
        _write_blob(fh, name.encode("utf-8"))
        fh.write(_u32(arr.ndim))
        for d in arr.shape:
            fh.write(_u32(d))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return fh.getvalue()


def save_checkpoint(path, model: Model, epoch=0, rng_state=None, extra=None):
    data = dumps(model, epoch, rng_state, extra)
    Path(path).write_bytes(data)
    return path


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise FormatError("truncated checkpoint", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]


def loads(buf: bytes, expected_config: ModelConfig | None = None):
    """Rebuild a model from checkpoint bytes.

    Returns:
        ``(model, meta)`` where ``meta`` holds epoch, RNG state and extras.

    Raises:
        ConfigError: the stored config differs from ``expected_config``.
    """
    r = _Reader(buf)
    if r.take(8) != MAGIC:
        raise FormatError("not a checkpoint (bad magic)", 0)
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 8)
    meta = json.loads(r.take(r.u32()).decode("utf-8"))
    config = ModelConfig.from_dict(meta["config"])
    if expected_config is not None and expected_config.to_dict() != config.to_dict():
        diff = [k for k, v in config.to_dict().items() if expected_config.to_dict().get(k) != v]
        raise ConfigError(diff[0] if diff else "config", "checkpoint was saved under a different model config")
    model = build_model(config, seed=0)
    arrays = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        shape = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)

    for name, p in model.named_parameters():
        p.data[...] = _get(arrays, f"param/{name}", p.data.shape)
        p.m[...] = _get(arrays, f"adam_m/{name}", p.data.shape)
        p.v[...] = _get(arrays, f"adam_v/{name}", p.data.shape)
        p.step_count = int(meta["adam_steps"].get(name, 0))
    for name, b in model.named_buffers():
        b[...] = _get(arrays, f"buffer/{name}", b.shape)
    return model, meta


def _get(arrays, key, shape):
    try:
        arr = arrays[key]
    except KeyError:
        raise FormatError(f"checkpoint lacks entry {key!r}") from None
    if arr.shape != shape:
        raise FormatError(f"entry {key!r} has shape {arr.shape}, model expects {shape}")
    return arr


def load_checkpoint(path, expected_config: ModelConfig | None = None):
    return loads(Path(path).read_bytes(), expected_config)
