"""Self-describing binary container for checkpoints and datasets.

Layout (all integers little-endian)::

    magic      8 bytes  b"HCUNROLL"
    version    u32
    header     u32 byte length, then UTF-8 "key=value" lines
    count      u32 number of tensor records
    record     u32 name length, UTF-8 name, u32 rank, rank x u64 dims,
               prod(dims) x float64

Records keep insertion order, so write -> read -> write is byte-identical.
"""

from __future__ import annotations

import io
import struct
from collections.abc import Mapping
from pathlib import Path

import numpy as np

MAGIC = b"HCUNROLL"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """The file is not a valid container."""


def _encode_header(header: Mapping[str, str]) -> bytes:
    lines = []
    for key, value in header.items():
        key, value = str(key), str(value)
        if "=" in key or "\n" in key or "\n" in value:
            raise ValueError(f"header entry {key!r} cannot be encoded")
        lines.append(f"{key}={value}\n")
    return "".join(lines).encode("utf-8")


def dumps(header: Mapping[str, str], tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    text = _encode_header(header)
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise FormatError("truncated container")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(8)) != MAGIC:
        raise FormatError("bad magic; not an hcunroll container")
    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported container version {version}")
    (hlen,) = struct.unpack("<I", take(4))
    header = {}
    for line in bytes(take(hlen)).decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        header[key] = value
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(dims)
        tensors[name] = arr
    if pos != len(view):
        raise FormatError("trailing bytes after last record")
    return header, tensors


def save(path: str | Path, header: Mapping[str, str], tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(header, tensors))


def load(path: str | Path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())
