"""Binary snapshot container and plain-text manifests.

Layout (all little-endian):

    bytes 0..3    magic "NSTG"
    bytes 4..7    format version, u32 (currently 1)
    bytes 8..11   ndim, u32
    then          ndim dimension sizes, u64 each
    then          dtype code, u8 (0 = float64)
    then          payload, row-major float64

Sequences are one file per frame plus a manifest: one "<path> <time>" line
per frame, times written with repr so they round-trip exactly. Parameter
checkpoints reuse the container with a manifest of tensor names and shapes.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Sequence

import numpy as np

from .fields import Field, FieldSequence, GridSpec, PERIODIC

MAGIC = b"NSTG"
VERSION = 1
DTYPE_F64 = 0
MAX_NDIM = 8
MAX_ELEMENTS = 1 << 40  # guards dims that cannot be a real payload

SEQUENCE_MANIFEST = "sequence.txt"
CHECKPOINT_MANIFEST = "tensors.txt"


class SnapshotFormatError(ValueError):
    """Malformed snapshot bytes; .offset is where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def save_array(path: str | Path, values: np.ndarray) -> None:
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if arr.ndim > MAX_NDIM or arr.ndim == 0:
        raise ValueError(f"snapshot arrays must have 1..{MAX_NDIM} dims, got {arr.ndim}")
    if arr.size > MAX_ELEMENTS:
        raise ValueError(f"snapshot too large: {arr.size} elements")
    header = bytearray()
    header += MAGIC
    header += int(VERSION).to_bytes(4, "little")
    header += int(arr.ndim).to_bytes(4, "little")
    for d in arr.shape:
        header += int(d).to_bytes(8, "little")
    header += bytes([DTYPE_F64])
    payload = arr.astype("<f8", copy=False).tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(bytes(header))
        fh.write(payload)


def load_array(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise SnapshotFormatError(f"truncated while reading {what}", off)
        chunk = blob[off : off + n]
        off += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise SnapshotFormatError(f"bad magic, expected {MAGIC!r}", 0)
    version = int.from_bytes(take(4, "version"), "little")
    if version != VERSION:
        raise SnapshotFormatError(f"unsupported version {version}", 4)
    ndim = int.from_bytes(take(4, "ndim"), "little")
    if ndim == 0 or ndim > MAX_NDIM:
        raise SnapshotFormatError(f"dimension count {ndim} out of range 1..{MAX_NDIM}", 8)
    dims = []
    for _ in range(ndim):
        dim_off = off
        d = int.from_bytes(take(8, "dimension"), "little")
        dims.append(d)
        if d == 0 or int(np.prod(dims, dtype=object)) > MAX_ELEMENTS:
            raise SnapshotFormatError(f"dimension overflow in {tuple(dims)}", dim_off)
    dtype_off = off
    dtype = take(1, "dtype")[0]
    if dtype != DTYPE_F64:
        raise SnapshotFormatError(f"unknown dtype code {dtype}", dtype_off)
    count = int(np.prod(dims, dtype=object))
    want = count * 8
    if len(blob) - off != want:
        raise SnapshotFormatError(
            f"payload has {len(blob) - off} bytes, expected {want}", off + min(len(blob) - off, want)
        )
    arr = np.frombuffer(blob[off:], dtype="<f8", count=count).reshape(dims)
    return arr.astype(np.float64, copy=True)


def save_field(path: str | Path, field: Field) -> None:
    save_array(path, field.values)


def load_field(
    path: str | Path,
    *,
    dx: float = 1.0,
    boundary: str = PERIODIC,
    time: float = 0.0,
    grid: GridSpec | None = None,
) -> Field:
    """Values come from the file; grid metadata from the caller (the
    container stores raw arrays only, spatial metadata travels in configs)."""
    values = load_array(path)
    if values.ndim != 2:
        raise SnapshotFormatError(f"field snapshot must be 2-D, got {values.ndim}-D", 8)
    if grid is None:
        grid = GridSpec(height=values.shape[0], width=values.shape[1], dx=dx, boundary=boundary)
    return Field(grid, values, time)


def save_sequence(directory: str | Path, seq: FieldSequence, prefix: str = "frame") -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for k, frame in enumerate(seq.frames):
        name = f"{prefix}_{k:04d}.nstg"
        save_field(directory / name, frame)
        lines.append(f"{name} {frame.time!r}\n")
    (directory / SEQUENCE_MANIFEST).write_text("".join(lines), encoding="utf-8")


def load_sequence(
    directory: str | Path,
    *,
    dx: float = 1.0,
    boundary: str = PERIODIC,
    grid: GridSpec | None = None,
) -> FieldSequence:
    directory = Path(directory)
    manifest = directory / SEQUENCE_MANIFEST
    if not manifest.exists():
        raise FileNotFoundError(f"no sequence manifest at {manifest}")
    frames = []
    for line in manifest.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        name, time_repr = line.rsplit(" ", 1)
        frames.append(
            load_field(directory / name, dx=dx, boundary=boundary, time=float(time_repr), grid=grid)
        )
    if len(frames) == 1:
        return FieldSequence(frames=tuple(frames), dt=1.0)
    dt = frames[1].time - frames[0].time
    return FieldSequence(frames=tuple(frames), dt=dt)


def save_named_arrays(directory: str | Path, named: Sequence[tuple[str, np.ndarray]]) -> None:
    """Checkpoint container: one snapshot per tensor plus a name/shape manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for idx, (name, arr) in enumerate(named):
        fname = f"tensor_{idx:04d}.nstg"
        save_array(directory / fname, arr)
        dims = "x".join(str(d) for d in arr.shape)
        lines.append(f"{fname} {name} {dims}\n")
    (directory / CHECKPOINT_MANIFEST).write_text("".join(lines), encoding="utf-8")


def load_named_arrays(directory: str | Path) -> list[tuple[str, np.ndarray]]:
    directory = Path(directory)
    manifest = directory / CHECKPOINT_MANIFEST
    if not manifest.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest}")
    out = []
    for line in manifest.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        fname, name, dims = line.split(" ")
        arr = load_array(directory / fname)
        want = tuple(int(d) for d in dims.split("x"))
        if arr.shape != want:
            raise SnapshotFormatError(f"tensor {name} has shape {arr.shape}, manifest says {want}", 0)
        out.append((name, arr))
    return out


def file_digest(path: str | Path) -> str:
    """Stable content digest used by rerun-identity checks."""
    import hashlib

    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


def tree_digest(root: str | Path, *, exclude: tuple[str, ...] = ()) -> dict[str, str]:
    root = Path(root)
    out: dict[str, str] = {}
    for dirpath, _, files in os.walk(root):
        for f in sorted(files):
            p = Path(dirpath) / f
            rel = str(p.relative_to(root))
            if any(rel.endswith(e) for e in exclude):
                continue
            out[rel] = file_digest(p)
    return out
