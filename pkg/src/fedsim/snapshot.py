"""Binary snapshot files: checkpoints, datasets, triggers.

All artifacts share the same conventions: a magic prefix, a little-endian
header with length-prefixed UTF-8 names and integer offsets/shapes, then
raw array payloads. Checkpoints store a single float64 vector addressed by
a layout table; datasets and triggers store named arrays. Round-trips are
bit-exact.
"""

from __future__ import annotations

import struct

import numpy as np

from .nn import FlatParams, LayoutEntry

MAGIC_CHECKPOINT = b"FEDSIMCP"
MAGIC_DATASET = b"FEDSIMDS"
MAGIC_TRIGGER = b"FEDSIMTR"
FORMAT_VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f8"), 1: np.dtype("<i8")}
_CODE_FOR_KIND = {"f": 0, "i": 1}


class SnapshotError(ValueError):
    pass


def _pack_name(name: str) -> bytes:
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise SnapshotError(f"name too long: {name!r}")
    return struct.pack("<H", len(raw)) + raw


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise SnapshotError("truncated snapshot file")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")


# ---------------------------------------------------------------------------
# Checkpoints: layout table + one raw float64 vector
# ---------------------------------------------------------------------------


def save_params(path, params: FlatParams) -> None:
    parts = [MAGIC_CHECKPOINT, struct.pack("<II", FORMAT_VERSION, len(params.layout))]
    for entry in params.layout:
        parts.append(_pack_name(entry.name))
        parts.append(struct.pack("<QB", entry.offset, len(entry.shape)))
        parts.append(struct.pack(f"<{len(entry.shape)}I", *entry.shape))
    parts.append(struct.pack("<Q", params.data.size))
    parts.append(np.ascontiguousarray(params.data, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_params(path) -> FlatParams:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(8) != MAGIC_CHECKPOINT:
        raise SnapshotError(f"{path}: not a parameter checkpoint")
    version, n_entries = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise SnapshotError(f"{path}: unsupported checkpoint version {version}")
    layout = []
    for _ in range(n_entries):
        name = r.name()
        offset, ndim = r.unpack("<QB")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        layout.append(LayoutEntry(name, int(offset), tuple(int(s) for s in shape)))
    (total,) = r.unpack("<Q")
    data = np.frombuffer(r.take(total * 8), dtype="<f8").copy()
    return FlatParams(data, layout)


# ---------------------------------------------------------------------------
# Named-array containers (datasets, triggers)
# ---------------------------------------------------------------------------


def save_arrays(path, arrays: dict, magic: bytes = MAGIC_DATASET) -> None:
    """Write named float64/int64 arrays with an explicit offset table."""
    header = [magic, struct.pack("<II", FORMAT_VERSION, len(arrays))]
    payload = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _CODE_FOR_KIND.get(arr.dtype.kind)
        if code is None:
            raise SnapshotError(f"array {name!r} has unsupported dtype {arr.dtype}")
        arr = np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code])
        raw = arr.tobytes()
        header.append(_pack_name(name))
        header.append(struct.pack("<BB", code, arr.ndim))
        header.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        header.append(struct.pack("<QQ", offset, len(raw)))
        payload.append(raw)
        offset += len(raw)
    with open(path, "wb") as fh:
        fh.write(b"".join(header) + b"".join(payload))


def load_arrays(path, magic: bytes = MAGIC_DATASET) -> dict:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(8) != magic:
        raise SnapshotError(f"{path}: magic bytes do not match {magic!r}")
    version, n_arrays = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise SnapshotError(f"{path}: unsupported container version {version}")
    metas = []
    for _ in range(n_arrays):
        name = r.name()
        code, ndim = r.unpack("<BB")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        offset, nbytes = r.unpack("<QQ")
        metas.append((name, code, shape, offset, nbytes))
    base = r.pos
    out = {}
    for name, code, shape, offset, nbytes in metas:
        raw = r.buf[base + offset : base + offset + nbytes]
        if len(raw) != nbytes:
            raise SnapshotError(f"{path}: truncated payload for {name!r}")
        out[name] = np.frombuffer(raw, dtype=_DTYPE_CODES[code]).copy().reshape(shape)
    return out
