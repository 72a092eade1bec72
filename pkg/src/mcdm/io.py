"""MCT1 tensor files and the named-section pack container.

Single tensor::

    b"MCT1" + b"<dtype> <ndim> <d0> ... <dk>\\n" + little-endian floats

Pack (checkpoints, clips, packed videos)::

    b"MCTP\\n" + b"meta <utf-8 text>\\n"
    then per section: b"@<name>\\n" + one MCT1 tensor
"""
from __future__ import annotations

import io
import os
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"MCT1"
PACK_MAGIC = b"MCTP\n"
_WIRE = {"float32": "<f4", "float64": "<f8"}
_MAX_HEADER = 4096


class FormatError(ValueError):
    """Raised when a file is not a well-formed MCT1/MCTP file."""

    def __init__(self, source, reason: str):
        self.source = str(source)
        self.reason = reason
        super().__init__(f"{self.source}: {reason}")


def _array(x) -> np.ndarray:
    arr = getattr(x, "data", x)
    arr = np.asarray(arr)
    if arr.dtype.name not in _WIRE:
        arr = arr.astype(np.float32)
    return arr


def write_tensor_to(fh: BinaryIO, x) -> None:
    arr = _array(x)
    dims = " ".join(str(d) for d in arr.shape)
    header = f"{arr.dtype.name} {arr.ndim}" + (f" {dims}" if dims else "") + "\n"
    fh.write(MAGIC)
    fh.write(header.encode("utf-8"))
    fh.write(np.ascontiguousarray(arr, dtype=_WIRE[arr.dtype.name]).tobytes())


def _readline(fh: BinaryIO, source) -> bytes:
    line = fh.readline(_MAX_HEADER)
    if not line.endswith(b"\n"):
        raise FormatError(source, "truncated or oversized header line")
    return line


def read_tensor_from(fh: BinaryIO, source="<stream>") -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise FormatError(source, f"bad magic {magic!r}, expected {MAGIC!r}")
    fields = _readline(fh, source).decode("utf-8", errors="replace").split()
    if len(fields) < 2 or fields[0] not in _WIRE:
        raise FormatError(source, f"bad header {' '.join(fields)!r}")
    try:
        ndim = int(fields[1])
        dims = [int(d) for d in fields[2:]]
    except ValueError:
        raise FormatError(source, f"bad header {' '.join(fields)!r}") from None
    if ndim != len(dims) or any(d < 0 for d in dims):
        raise FormatError(source, f"shape header inconsistent: ndim={ndim} dims={dims}")
    dtype = np.dtype(_WIRE[fields[0]])
    count = int(np.prod(dims)) if dims else 1
    payload = fh.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise FormatError(source, f"truncated payload: expected {count * dtype.itemsize} bytes, "
                                  f"got {len(payload)}")
    return np.frombuffer(payload, dtype=dtype).astype(fields[0]).reshape(dims)


def save_tensor(path, x) -> None:
    with open(path, "wb") as fh:
        write_tensor_to(fh, x)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        arr = read_tensor_from(fh, path)
        if fh.read(1):
            raise FormatError(path, "trailing bytes after tensor payload")
    return arr


def tensor_to_bytes(x) -> bytes:
    buf = io.BytesIO()
    write_tensor_to(buf, x)
    return buf.getvalue()


def tensor_from_bytes(blob: bytes, source="<bytes>") -> np.ndarray:
    buf = io.BytesIO(blob)
    arr = read_tensor_from(buf, source)
    if buf.read(1):
        raise FormatError(source, "trailing bytes after tensor payload")
    return arr


def save_pack(path, sections: dict, meta: str = "") -> None:
    """Write named tensors to one file; written to a temp name then renamed."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(PACK_MAGIC)
        fh.write(("meta " + meta.replace("\n", " ") + "\n").encode("utf-8"))
        for name, x in sections.items():
            if "\n" in name:
                raise ValueError(f"section name may not contain newlines: {name!r}")
            fh.write(b"@" + name.encode("utf-8") + b"\n")
            write_tensor_to(fh, x)
    os.replace(tmp, path)


def load_pack(path) -> tuple[dict, str]:
    """Return ``(sections, meta)``; raises :class:`FormatError` naming the file."""
    sections = {}
    with open(path, "rb") as fh:
        if fh.read(len(PACK_MAGIC)) != PACK_MAGIC:
            raise FormatError(path, "bad pack magic")
        meta_line = _readline(fh, path).decode("utf-8")
        if not meta_line.startswith("meta "):
            raise FormatError(path, "missing meta line")
        meta = meta_line[5:].rstrip("\n")
        while True:
            first = fh.read(1)
            if not first:
                break
            if first != b"@":
                raise FormatError(path, "expected section marker '@'")
            name = _readline(fh, path).decode("utf-8").rstrip("\n")
            if name in sections:
                raise FormatError(path, f"duplicate section {name!r}")
            sections[name] = read_tensor_from(fh, f"{path}[{name}]")
    return sections, meta
