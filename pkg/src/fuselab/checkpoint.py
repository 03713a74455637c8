"""U2CK checkpoint container.

Layout (little-endian)::

    4   magic b"U2CK"
    2   u16 format version (1)
    4   u32 n, then n bytes of UTF-8 JSON: {"model": ..., "train": ..., "meta": ...}
    4   u32 n, then n bytes of UTF-8 JSON: numpy bit-generator state (or null)
    4   u32 tensor count
        per tensor:
        2   u16 name length, then UTF-8 name
        1   u8 dtype code (1 = f32, 2 = f64)
        1   u8 ndim
        4*ndim  u32 extents
        ...     raw little-endian scalars, row-major

Tensor names are ``param/<name>`` for model weights and ``adam.m/<name>``,
``adam.v/<name>`` for optimizer moments.  JSON is written with sorted keys
so equal runs produce byte-identical files.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .datagen import _atomic_write
from .errors import FormatError

MAGIC = b"U2CK"
VERSION = 1
_DTYPE_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}
_CODE_DTYPES = {1: "<f4", 2: "<f8"}


@dataclass
class Checkpoint:
    model: dict
    tensors: dict
    train: Optional[dict] = None
    meta: dict = field(default_factory=dict)
    rng_state: Optional[dict] = None

    def group(self, prefix):
        """Tensors under ``prefix/`` with the prefix stripped."""
        head = prefix + "/"
        return {k[len(head):]: v for k, v in self.tensors.items() if k.startswith(head)}


def _json_bytes(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<H", VERSION)]
    for blob in (_json_bytes({"model": ckpt.model, "train": ckpt.train, "meta": ckpt.meta}),
                 _json_bytes(ckpt.rng_state)):
        parts += [struct.pack("<I", len(blob)), blob]
    parts.append(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise TypeError(f"tensor {name}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> Checkpoint:
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated checkpoint while reading {what}", offset=len(buf))
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise FormatError("bad checkpoint magic", offset=0)
    (version,) = struct.unpack("<H", take(2, "version"))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    blobs = []
    for what in ("config", "rng state"):
        (n,) = struct.unpack("<I", take(4, f"{what} length"))
        start = pos
        try:
            blobs.append(json.loads(take(n, what).decode("utf-8")))
        except ValueError as exc:
            raise FormatError(f"invalid {what} JSON: {exc}", offset=start) from exc
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2, "name length"))
        name = take(n, "tensor name").decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2, "tensor header"))
        if code not in _CODE_DTYPES:
            raise FormatError(f"tensor {name}: unknown dtype code {code}", offset=pos - 2)
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "tensor extents"))
        dt = np.dtype(_CODE_DTYPES[code])
        nbytes = dt.itemsize * int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(take(nbytes, f"tensor {name}"), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if pos != len(buf):
        raise FormatError("trailing bytes after last tensor", offset=pos)
    doc = blobs[0]
    return Checkpoint(model=doc["model"], tensors=tensors, train=doc.get("train"),
                      meta=doc.get("meta") or {}, rng_state=blobs[1])


def save(ckpt: Checkpoint, path):
    _atomic_write(path, encode(ckpt))


def load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode(fh.read())
