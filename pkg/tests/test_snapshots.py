"""Binary snapshot container: round trips and malformed-input offsets."""

from __future__ import annotations

import numpy as np
import pytest

from stagsolve.fields import Field, FieldSequence, GridSpec
from stagsolve.snapshots import (
    MAGIC,
    SnapshotFormatError,
    file_digest,
    load_array,
    load_field,
    load_named_arrays,
    load_sequence,
    save_array,
    save_field,
    save_named_arrays,
    save_sequence,
)


def test_array_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arr = rng.standard_normal((3, 5, 2))
    arr[0, 0, 0] = -0.0
    arr[1, 1, 1] = 5e-324  # subnormal survives
    p = tmp_path / "a.nstg"
    save_array(p, arr)
    back = load_array(p)
    assert back.shape == arr.shape
    assert arr.tobytes() == back.tobytes()  # bit-for-bit


def test_save_is_deterministic(tmp_path):
    arr = np.linspace(-1, 1, 12).reshape(3, 4)
    save_array(tmp_path / "a.nstg", arr)
    save_array(tmp_path / "b.nstg", arr)
    assert file_digest(tmp_path / "a.nstg") == file_digest(tmp_path / "b.nstg")


def test_field_round_trip(tmp_path):
    g = GridSpec(height=4, width=6, dx=0.125)
    f = Field(g, np.arange(24.0).reshape(4, 6), time=0.75)
    save_field(tmp_path / "f.nstg", f)
    back = load_field(tmp_path / "f.nstg", dx=0.125, time=0.75)
    assert np.array_equal(back.values, f.values)
    assert back.grid.shape == (4, 6)


def test_sequence_round_trip_with_exact_times(tmp_path):
    g = GridSpec(height=4, width=4, dx=0.25)
    rng = np.random.default_rng(1)
    dt = 0.1
    frames = tuple(Field(g, rng.standard_normal((4, 4)), time=k * dt) for k in range(4))
    seq = FieldSequence(frames=frames, dt=dt)
    save_sequence(tmp_path / "seq", seq)
    back = load_sequence(tmp_path / "seq", dx=0.25)
    assert len(back) == 4
    assert back.times == seq.times
    for a, b in zip(seq.frames, back.frames):
        assert np.array_equal(a.values, b.values)


def test_checkpoint_round_trip_preserves_order(tmp_path):
    rng = np.random.default_rng(2)
    named = [
        ("conv0.weight", rng.standard_normal((4, 1, 3, 3))),
        ("conv0.bias", rng.standard_normal((4, 1, 1))),
        ("head.weight", rng.standard_normal((1, 4, 3, 3))),
    ]
    save_named_arrays(tmp_path / "ckpt", named)
    back = load_named_arrays(tmp_path / "ckpt")
    assert [n for n, _ in back] == [n for n, _ in named]
    for (_, a), (_, b) in zip(named, back):
        assert np.array_equal(a, b)


class TestFormatErrors:
    def test_bad_magic_offset_zero(self, tmp_path):
        p = tmp_path / "bad.nstg"
        p.write_bytes(b"XXXX" + b"\x00" * 32)
        with pytest.raises(SnapshotFormatError) as e:
            load_array(p)
        assert e.value.offset == 0

    def test_bad_version(self, tmp_path):
        p = tmp_path / "bad.nstg"
        p.write_bytes(MAGIC + (9).to_bytes(4, "little") + b"\x00" * 16)
        with pytest.raises(SnapshotFormatError) as e:
            load_array(p)
        assert e.value.offset == 4

    def test_truncated_header(self, tmp_path):
        p = tmp_path / "bad.nstg"
        p.write_bytes(MAGIC + (1).to_bytes(4, "little"))
        with pytest.raises(SnapshotFormatError) as e:
            load_array(p)
        assert e.value.offset == 8

    def test_truncated_payload_reports_offset(self, tmp_path):
        p = tmp_path / "ok.nstg"
        save_array(p, np.zeros((2, 2)))
        blob = p.read_bytes()
        q = tmp_path / "cut.nstg"
        q.write_bytes(blob[:-8])  # drop one float
        with pytest.raises(SnapshotFormatError) as e:
            load_array(q)
        assert "payload" in str(e.value)
        assert e.value.offset > 8

    def test_bad_dtype_code(self, tmp_path):
        p = tmp_path / "ok.nstg"
        save_array(p, np.zeros(3))
        blob = bytearray(p.read_bytes())
        dtype_off = 4 + 4 + 4 + 8  # magic, version, ndim, one dim
        blob[dtype_off] = 7
        q = tmp_path / "bad.nstg"
        q.write_bytes(bytes(blob))
        with pytest.raises(SnapshotFormatError) as e:
            load_array(q)
        assert e.value.offset == dtype_off

    def test_dimension_overflow(self, tmp_path):
        header = bytearray()
        header += MAGIC
        header += (1).to_bytes(4, "little")
        header += (2).to_bytes(4, "little")
        header += (2).to_bytes(8, "little")
        header += (1 << 62).to_bytes(8, "little")
        header += bytes([0])
        p = tmp_path / "huge.nstg"
        p.write_bytes(bytes(header))
        with pytest.raises(SnapshotFormatError) as e:
            load_array(p)
        assert e.value.offset == 20  # second dimension field

    def test_field_requires_2d(self, tmp_path):
        p = tmp_path / "v.nstg"
        save_array(p, np.zeros(5))
        with pytest.raises(SnapshotFormatError):
            load_field(p)
