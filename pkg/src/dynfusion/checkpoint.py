"""Binary container for named float64 arrays plus JSON metadata.

Layout (all integers little-endian)::

    magic      4 bytes  b"DFCK"
    version    u32
    meta_len   u32, then meta_len bytes of UTF-8 JSON (sorted keys, compact)
    n_records  u32
    per record:
        name_len u32, name bytes (UTF-8)
        dtype    u8   (1 = float64)
        rank     u32
        dims     rank x u64
        payload  prod(dims) x float64, little-endian

Serialising the same content twice gives identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"DFCK"
FORMAT_VERSION = 1
DTYPE_F64 = 1


def _dump_meta(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode("utf-8")


@dataclass
class Checkpoint:
    """Ordered name -> array records with free-form metadata."""

    records: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def add(self, name: str, values) -> None:
        if name in self.records:
            raise CheckpointError(f"duplicate record name {name!r}")
        arr = np.ascontiguousarray(values, dtype="<f8")
        self.records[name] = arr

    def __contains__(self, name):
        return name in self.records

    def __getitem__(self, name):
        return self.records[name]

    def names(self) -> list[str]:
        return list(self.records)

    def to_bytes(self) -> bytes:
        out = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
        meta = _dump_meta(self.metadata)
        out.append(struct.pack("<I", len(meta)))
        out.append(meta)
        out.append(struct.pack("<I", len(self.records)))
        for name, arr in self.records.items():
            raw_name = name.encode("utf-8")
            out.append(struct.pack("<I", len(raw_name)))
            out.append(raw_name)
            out.append(struct.pack("<BI", DTYPE_F64, arr.ndim))
            out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        view = memoryview(blob)
        pos = 0

        def take(n):
            nonlocal pos
            if pos + n > len(view):
                raise CheckpointError("truncated checkpoint")
            chunk = view[pos:pos + n]
            pos += n
            return chunk

        if bytes(take(4)) != MAGIC:
            raise CheckpointError("not a checkpoint container (bad magic)")
        (version,) = struct.unpack("<I", take(4))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported container version {version}")
        (meta_len,) = struct.unpack("<I", take(4))
        metadata = json.loads(bytes(take(meta_len)).decode("utf-8"))
        (count,) = struct.unpack("<I", take(4))
        ckpt = cls(metadata=metadata)
        for _ in range(count):
            (name_len,) = struct.unpack("<I", take(4))
            name = bytes(take(name_len)).decode("utf-8")
            dtype, rank = struct.unpack("<BI", take(5))
            if dtype != DTYPE_F64:
                raise CheckpointError(f"record {name!r}: unknown dtype tag {dtype}")
            dims = struct.unpack(f"<{rank}Q", take(8 * rank))
            n = int(np.prod(dims, dtype=np.int64)) if rank else 1
            arr = np.frombuffer(bytes(take(8 * n)), dtype="<f8").reshape(dims).astype(np.float64)
            ckpt.add(name, arr)
        if pos != len(view):
            raise CheckpointError("trailing bytes after last record")
        return ckpt

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise CheckpointError(f"checkpoint not found: {path}")
        return cls.from_bytes(path.read_bytes())
