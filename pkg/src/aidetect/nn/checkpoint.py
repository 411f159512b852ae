"""Binary parameter checkpoints.

Layout, little-endian throughout::

    "AIDW" | u32 version | u32 entry count
    per entry: u8 kind (0 parameter, 1 buffer) | u16 name length | name (utf-8)
               | u8 ndim | u32 dims... | float32 values
    u32 CRC32 of everything before it

Entries appear in the model's own traversal order, so two models of the
same architecture produce byte-identical files for identical weights.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from ..dataset import ChecksumMismatch, FormatError, atomic_write
from .layers import Layer, ShapeMismatch

CKPT_MAGIC = b"AIDW"
CKPT_VERSION = 1
PARAM, BUFFER = 0, 1
_HEAD = struct.Struct("<4sII")
_U32 = struct.Struct("<I")


def _entries(model: Layer):
    for name, p in model.named_params():
        yield PARAM, name, p.data
    for name, b in model.named_buffers():
        yield BUFFER, name, b


def checkpoint_bytes(model: Layer) -> bytes:
    entries = list(_entries(model))
    parts = [_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(entries))]
    for kind, name, arr in entries:
        raw = name.encode("utf-8")
        parts.append(struct.pack(f"<BH{len(raw)}sB", kind, len(raw), raw, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + _U32.pack(zlib.crc32(body))


def save_checkpoint(model: Layer, path: str | Path) -> None:
    atomic_write(path, checkpoint_bytes(model))


def read_checkpoint(data: bytes) -> list[tuple[int, str, np.ndarray]]:
    """Decode and verify a checkpoint into ``(kind, name, float32 array)`` triples."""
    if len(data) < _HEAD.size + _U32.size:
        raise FormatError("file too short for a checkpoint")
    magic, version, count = _HEAD.unpack_from(data, 0)
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (crc,) = _U32.unpack_from(data, len(data) - _U32.size)
    if zlib.crc32(data[: len(data) - _U32.size]) != crc:
        raise ChecksumMismatch("CRC32 does not match checkpoint contents")
    end = len(data) - _U32.size
    pos = _HEAD.size
    out = []
    try:
        for _ in range(count):
            kind, name_len = struct.unpack_from("<BH", data, pos)
            pos += 3
            name = data[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * size > end:
                raise FormatError(f"entry {name!r} runs past the end of the file")
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
            pos += 4 * size
            out.append((kind, name, arr))
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"truncated or corrupt entry table: {exc}") from exc
    if pos != end:
        raise FormatError(f"{end - pos} trailing bytes after the last entry")
    return out


def load_checkpoint(model: Layer, path_or_bytes: str | Path | bytes) -> Layer:
    """Copy stored values into ``model``; names, kinds and shapes must match exactly."""
    data = path_or_bytes if isinstance(path_or_bytes, bytes) else Path(path_or_bytes).read_bytes()
    stored = read_checkpoint(data)
    expected = [(k, n, a.shape) for k, n, a in _entries(model)]
    got = [(k, n, a.shape) for k, n, a in stored]
    if expected != got:
        missing = {n for _, n, _ in expected} ^ {n for _, n, _ in got}
        raise ShapeMismatch(f"checkpoint does not fit this model (differing entries: {sorted(missing)[:5]})")
    params = dict(model.named_params())
    layers = dict(model.named_layers())
    for kind, name, arr in stored:
        if kind == PARAM:
            p = params[name]
            p.data[...] = arr.astype(p.data.dtype)
        else:
            owner, _, bname = name.rpartition(".")
            layer = layers[owner]
            layer.set_buffer(bname, arr.astype(layer.own_buffers()[bname].dtype))
    return model
