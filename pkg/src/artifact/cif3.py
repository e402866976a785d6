"""Binary field dumps.

A record is the 8-byte magic ``CIF3\\0\\0\\0\\1``, four little-endian ``u32``
(rank code, N, component count, time-sample count), the ``f64`` time stamps
and then the ``f64`` component arrays with ``x`` varying fastest.  A state
file is a concatenation of records in a fixed field order; a JSON sidecar
next to it carries metadata.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .spectral_core import RANKS, SpectralError

MAGIC = b"CIF3\x00\x00\x00\x01"
RANK_CODES = {"scalar": 0, "vector": 1, "symmetric_tensor": 2}
RANK_NAMES = {v: k for k, v in RANK_CODES.items()}
_HEADER = struct.Struct("<4I")


class DumpError(ValueError):
    """Raised for malformed dump files."""


@dataclass
class FieldRecord:
    rank: str
    times: np.ndarray  # (n_t,)
    frames: np.ndarray  # (n_t, ncomp, N, N, N), axes (x, y, z)

    @property
    def N(self) -> int:
        return self.frames.shape[-1]


def encode(record: FieldRecord) -> bytes:
    frames = np.asarray(record.frames, dtype="<f8")
    nt, nc, N = frames.shape[0], frames.shape[1], frames.shape[-1]
    if RANKS[record.rank] != nc:
        raise SpectralError(f"rank {record.rank} needs {RANKS[record.rank]} components, got {nc}")
    head = MAGIC + _HEADER.pack(RANK_CODES[record.rank], N, nc, nt)
    times = np.asarray(record.times, dtype="<f8").tobytes()
    # (t, c, x, y, z) -> (t, c, z, y, x) so that x is fastest in memory
    body = np.ascontiguousarray(np.transpose(frames, (0, 1, 4, 3, 2))).tobytes()
    return head + times + body


def decode(buf: bytes, offset: int = 0) -> tuple[FieldRecord, int]:
    if buf[offset : offset + 8] != MAGIC:
        raise DumpError(f"bad magic at byte {offset}")
    offset += 8
    if len(buf) < offset + _HEADER.size:
        raise DumpError("truncated header")
    code, N, nc, nt = _HEADER.unpack_from(buf, offset)
    offset += _HEADER.size
    if code not in RANK_NAMES:
        raise DumpError(f"unknown rank code {code}")
    rank = RANK_NAMES[code]
    if RANKS[rank] != nc:
        raise DumpError(f"rank {rank} with {nc} components")
    need = 8 * nt + 8 * nt * nc * N**3
    if len(buf) < offset + need:
        raise DumpError("truncated data")
    times = np.frombuffer(buf, dtype="<f8", count=nt, offset=offset).copy()
    offset += 8 * nt
    data = np.frombuffer(buf, dtype="<f8", count=nt * nc * N**3, offset=offset)
    offset += 8 * nt * nc * N**3
    frames = np.transpose(data.reshape(nt, nc, N, N, N), (0, 1, 4, 3, 2)).astype(float)
    return FieldRecord(rank, times, np.ascontiguousarray(frames)), offset


def write_records(path, records: list[FieldRecord]) -> None:
    Path(path).write_bytes(b"".join(encode(r) for r in records))


def read_records(path) -> list[FieldRecord]:
    buf = Path(path).read_bytes()
    out = []
    offset = 0
    while offset < len(buf):
        rec, offset = decode(buf, offset)
        out.append(rec)
    return out


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def write_sidecar(path, meta: dict) -> None:
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True))


def read_sidecar(path) -> dict | None:
    p = sidecar_path(path)
    if not p.exists():
        return None
    return json.loads(p.read_text())
