"""Binary checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic b"MLASRCKP"
    uint32    format version (1)
    uint32    N, then N bytes of UTF-8 JSON:
              {"model_config": {...}, "meta": {...}}
    uint32    number of blobs, then per blob:
        uint16  name length, name (UTF-8)
        uint8   dtype code: 1 = float32, 2 = float64, 3 = int64
        uint8   ndim, then ndim x uint32 dimensions
        raw     row-major little-endian values

Loading rebuilds the model from the stored config and checks every
parameter blob against the expected shape.
"""

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .model import ModelConfig, MultiLevelASR

MAGIC = b"MLASRCKP"
VERSION = 1
_DTYPES = {1: "<f4", 2: "<f8", 3: "<i8"}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2, np.dtype("int64"): 3}


def save_checkpoint(path, model_cfg, blobs, meta=None):
    header = json.dumps({"model_config": model_cfg.to_dict(), "meta": meta or {}},
                        sort_keys=True, ensure_ascii=False).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(header)), header, struct.pack("<I", len(blobs))]
    for name, value in blobs.items():
        arr = np.ascontiguousarray(value)
        if arr.dtype not in _CODES:
            raise DataError(f"{name}: cannot store dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype(_DTYPES[_CODES[arr.dtype]]).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path):
    """Return (ModelConfig, name -> array, meta dict)."""
    raw = Path(path).read_bytes()
    try:
        return _parse(raw, path)
    except (struct.error, ValueError, KeyError, UnicodeDecodeError) as exc:
        raise DataError(f"{path}: corrupt checkpoint ({exc})") from exc


def _parse(raw, path):
    if raw[:8] != MAGIC:
        raise DataError(f"{path}: not a checkpoint")
    version, hlen = struct.unpack_from("<II", raw, 8)
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    blobs = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + nlen].decode("utf-8")
        pos += nlen
        code, ndim = struct.unpack_from("<BB", raw, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        dtype = np.dtype(_DTYPES[code])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if pos + nbytes > len(raw):
            raise DataError(f"{path}: truncated blob {name}")
        blobs[name] = np.frombuffer(raw, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != len(raw):
        raise DataError(f"{path}: {len(raw) - pos} trailing bytes")
    return ModelConfig.from_dict(header["model_config"]), blobs, header["meta"]


def save_model(path, model, meta=None):
    save_checkpoint(path, model.cfg, model.state_dict(), meta)


def load_model(path):
    """Rebuild a model from a checkpoint, validating every parameter shape."""
    cfg, blobs, meta = load_checkpoint(path)
    model = MultiLevelASR(cfg)
    for name, p in model.named_parameters():
        if name not in blobs:
            raise ConfigError(f"checkpoint lacks parameter {name}")
        if blobs[name].shape != p.shape:
            raise ConfigError(f"{name}: checkpoint shape {blobs[name].shape} != config shape {p.shape}")
    model.load_state_dict({n: blobs[n] for n, _ in model.named_parameters()})
    return model, meta
