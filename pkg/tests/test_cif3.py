import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from artifact.cif3 import MAGIC, DumpError, FieldRecord, decode, encode, read_records, read_sidecar, write_records, write_sidecar


def _record(rng, rank="vector", N=4, nt=3):
    ncomp = {"scalar": 1, "vector": 3, "symmetric_tensor": 6}[rank]
    return FieldRecord(rank, np.linspace(0, 1, nt), rng.standard_normal((nt, ncomp, N, N, N)))


def test_header_layout(rng):
    rec = _record(rng, "symmetric_tensor", N=2, nt=1)
    buf = encode(rec)
    assert buf[:8] == MAGIC
    assert struct.unpack_from("<4I", buf, 8) == (2, 2, 6, 1)
    assert len(buf) == 8 + 16 + 8 + 8 * 6 * 8


def test_x_varies_fastest(rng):
    frames = np.zeros((1, 1, 2, 2, 2))
    frames[0, 0, 1, 0, 0] = 7.0  # x index 1
    buf = encode(FieldRecord("scalar", np.zeros(1), frames))
    body = np.frombuffer(buf, dtype="<f8", offset=8 + 16 + 8)
    assert body[1] == 7.0 and np.count_nonzero(body) == 1


def test_file_round_trip(tmp_path, rng):
    recs = [_record(rng, r) for r in ("scalar", "vector", "symmetric_tensor")]
    path = tmp_path / "state.cif3"
    write_records(path, recs)
    back = read_records(path)
    assert [r.rank for r in back] == ["scalar", "vector", "symmetric_tensor"]
    for a, b in zip(recs, back):
        assert np.array_equal(a.times, b.times) and np.array_equal(a.frames, b.frames)
    write_sidecar(path, {"q": 1, "fields": ["rho"]})
    assert read_sidecar(path) == {"q": 1, "fields": ["rho"]}
    assert read_sidecar(tmp_path / "other.cif3") is None


def test_bad_magic(rng):
    buf = bytearray(encode(_record(rng)))
    buf[0:4] = b"NOPE"
    with pytest.raises(DumpError, match="magic"):
        decode(bytes(buf))


def test_truncated_data(rng):
    buf = encode(_record(rng))
    with pytest.raises(DumpError, match="truncated"):
        decode(buf[:-8])
    with pytest.raises(DumpError, match="truncated"):
        decode(buf[:12])


def test_inconsistent_components(rng):
    buf = bytearray(encode(_record(rng, "vector")))
    struct.pack_into("<I", buf, 16, 6)
    with pytest.raises(DumpError):
        decode(bytes(buf))


@given(st.sampled_from(["scalar", "vector", "symmetric_tensor"]), st.integers(1, 5), st.integers(1, 4), st.integers(0, 2**31))
def test_encode_decode_identity(rank, N, nt, seed):
    rec = _record(np.random.default_rng(seed), rank, N, nt)
    back, end = decode(encode(rec))
    assert end == len(encode(rec))
    assert back.rank == rank and np.array_equal(back.frames, rec.frames) and np.array_equal(back.times, rec.times)
