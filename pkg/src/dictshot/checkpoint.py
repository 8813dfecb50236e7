"""Versioned binary model checkpoints.

Layout (all integers little-endian)::

    b"DSCK"                      magic
    u32 version                  currently 1
    u32 n, n bytes               UTF-8 JSON header (architecture + metadata)
    u32 record count
    per record:
        u32 n, n bytes           UTF-8 name, e.g. "fc2.dictionary"
        u32 n, n bytes           UTF-8 role (dense|dictionary|coefficient|bias|buffer)
        u8  trainable
        u8  ndim, ndim x u32     shape
        u8  has_rows [, shape[0] x u8 row flags]
        prod(shape) x f64        values, row-major
    u32 crc32                    of every preceding byte

Float values are stored raw, so a round trip is bit-exact. Decomposition
provenance (beta, selected columns, achieved error) travels in the
architecture part of the header; JSON floats use the shortest round-trip
repr, so these are exact too.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .engine import Model
from .errors import ChecksumError, CheckpointError, VersionError

MAGIC = b"DSCK"
FORMAT_VERSION = 1


def _blob(b: bytes) -> bytes:
    return struct.pack("<I", len(b)) + b


def _str(s: str) -> bytes:
    return _blob(s.encode("utf-8"))


def _record(name, role, value, trainable=False, rows=None) -> bytes:
    value = np.ascontiguousarray(value, dtype="<f8")
    out = [_str(name), _str(role), struct.pack("<B", int(bool(trainable)))]
    out.append(struct.pack(f"<B{value.ndim}I", value.ndim, *value.shape))
    if rows is None:
        out.append(b"\x00")
    else:
        out.append(b"\x01" + np.asarray(rows, dtype=np.uint8).tobytes())
    out.append(value.tobytes())
    return b"".join(out)


def dumps(model: Model) -> bytes:
    header = {"architecture": model.architecture(), "metadata": model.metadata}
    records = [_record(n, p.role, p.value, p.trainable, p.rows) for n, p in model.named_params()]
    records += [_record(n, "buffer", b) for n, b in model.named_buffers()]
    body = b"".join(
        [
            MAGIC,
            struct.pack("<I", FORMAT_VERSION),
            _str(json.dumps(header, sort_keys=True)),
            struct.pack("<I", len(records)),
            *records,
        ]
    )
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u8(self):
        return self.take(1)[0]

    def text(self):
        return self.take(self.u32()).decode("utf-8")


def loads(buf: bytes) -> Model:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise CheckpointError("not a dictshot checkpoint (bad magic)")
    (version,) = struct.unpack("<I", buf[4:8])
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported checkpoint format version {version} (expected {FORMAT_VERSION})")
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != crc:
        raise ChecksumError("checkpoint checksum mismatch")
    r = _Reader(buf[:-4])
    r.take(8)
    header = json.loads(r.text())
    records = {}
    for _ in range(r.u32()):
        name, role = r.text(), r.text()
        trainable = bool(r.u8())
        ndim = r.u8()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        rows = None
        if r.u8():
            rows = np.frombuffer(r.take(shape[0]), dtype=np.uint8).astype(bool)
        count = int(np.prod(shape))
        value = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
        records[name] = (role, trainable, rows, value)
    if r.pos != len(r.buf):
        raise CheckpointError("trailing bytes after the last record")

    model = Model.from_architecture(
        header["architecture"], {n: rec[3] for n, rec in records.items()}, header.get("metadata")
    )
    for name, p in model.named_params():
        if name not in records:
            raise CheckpointError(f"parameter {name!r} missing from checkpoint")
        role, trainable, rows, _ = records[name]
        if role != p.role:
            raise CheckpointError(f"parameter {name!r} stored with role {role!r}, expected {p.role!r}")
        p.trainable, p.rows = trainable, rows
    return model


def save_checkpoint(model: Model, path) -> None:
    Path(path).write_bytes(dumps(model))


def load_checkpoint(path) -> Model:
    return loads(Path(path).read_bytes())


def to_json(model: Model) -> dict:
    """Lossless JSON-compatible export, for inspection and debugging."""
    return {
        "format_version": FORMAT_VERSION,
        "architecture": model.architecture(),
        "metadata": model.metadata,
        "params": {
            n: {
                "role": p.role,
                "trainable": p.trainable,
                "shape": list(p.value.shape),
                "rows": None if p.rows is None else p.rows.astype(int).tolist(),
                "values": p.value.ravel().tolist(),
            }
            for n, p in model.named_params()
        },
        "buffers": {n: {"shape": list(b.shape), "values": b.ravel().tolist()} for n, b in model.named_buffers()},
    }


def from_json(doc: dict) -> Model:
    arrays = {n: np.array(rec["values"], dtype=np.float64).reshape(rec["shape"]) for n, rec in doc["params"].items()}
    arrays.update(
        {n: np.array(rec["values"], dtype=np.float64).reshape(rec["shape"]) for n, rec in doc["buffers"].items()}
    )
    model = Model.from_architecture(doc["architecture"], arrays, doc.get("metadata"))
    for name, p in model.named_params():
        rec = doc["params"][name]
        p.trainable = rec["trainable"]
        p.rows = None if rec["rows"] is None else np.array(rec["rows"], dtype=bool)
    return model
