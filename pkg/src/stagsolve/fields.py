"""Grids, scalar fields, and the staggered space/time decomposition.

A fine field of shape (H, W) is split into s_h * s_w interleaved subgrids:
subgrid (i, j) collects every fine point whose row is congruent to i mod s_h
and whose column is congruent to j mod s_w. Reconstruction scatters the
subgrids back; both directions are pure index permutations and therefore
exact. Temporal decomposition slices a sequence of s_t consecutive frames
into per-offset inputs for solvers that step s_t coarse steps at once.

Row index                       maps to the y axis (row 0 is y = 0), column
index to the x axis. For wall-bounded grids the moving lid is the last row.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Iterator, Sequence

import numpy as np

PERIODIC = "periodic"
DIRICHLET_LID = "dirichlet-lid"
BOUNDARIES = (PERIODIC, DIRICHLET_LID)

# Frame times are compared with this absolute slack everywhere; times are
# stored exactly, the slack only absorbs float accumulation in t0 + k*dt.
TIME_ATOL = 1e-12


@dataclass(frozen=True)
class GridSpec:
    """Uniform 2-D grid: row/column counts, spacing, boundary handling.

    dx is the column (x) spacing. dy is the row (y) spacing and defaults to
    dx; it only differs for coarse grids cut from anisotropic stagger
    factors.
    """

    height: int
    width: int
    dx: float
    boundary: str = PERIODIC
    dy: float | None = None

    def __post_init__(self) -> None:
        if self.height < 2 or self.width < 2:
            raise ValueError(f"grid must be at least 2x2, got {self.height}x{self.width}")
        if not (self.dx > 0):
            raise ValueError(f"dx must be positive, got {self.dx}")
        if self.dy is not None and not (self.dy > 0):
            raise ValueError(f"dy must be positive, got {self.dy}")
        if self.boundary not in BOUNDARIES:
            raise ValueError(f"unknown boundary {self.boundary!r}, expected one of {BOUNDARIES}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def row_spacing(self) -> float:
        return self.dx if self.dy is None else self.dy

    @property
    def periodic(self) -> bool:
        return self.boundary == PERIODIC


def _frozen_f64(values: np.ndarray | Sequence, shape: tuple[int, ...]) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, copy=True)
    if arr.shape != shape:
        raise ValueError(f"values shape {arr.shape} does not match grid shape {shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("field values must be finite")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Field:
    """One scalar field on a grid at one instant. Values are immutable f64."""

    grid: GridSpec
    values: np.ndarray
    time: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", _frozen_f64(self.values, self.grid.shape))

    def with_values(self, values: np.ndarray) -> "Field":
        return Field(self.grid, values, self.time)

    def at_time(self, time: float) -> "Field":
        f = Field.__new__(Field)
        object.__setattr__(f, "grid", self.grid)
        object.__setattr__(f, "values", self.values)  # already frozen, share
        object.__setattr__(f, "time", time)
        return f


@dataclass(frozen=True)
class FieldSequence:
    """Consecutive frames on one grid with uniform spacing dt."""

    frames: tuple[Field, ...]
    dt: float

    def __post_init__(self) -> None:
        frames = tuple(self.frames)
        object.__setattr__(self, "frames", frames)
        if not frames:
            raise ValueError("sequence needs at least one frame")
        if not (self.dt > 0):
            raise ValueError(f"dt must be positive, got {self.dt}")
        g0 = frames[0].grid
        t0 = frames[0].time
        for k, f in enumerate(frames):
            if f.grid != g0:
                raise ValueError("all frames must share one grid")
            if abs(f.time - (t0 + k * self.dt)) > TIME_ATOL:
                raise ValueError(
                    f"frame {k} time {f.time} is not t0 + k*dt = {t0 + k * self.dt}"
                )

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, k: int) -> Field:
        return self.frames[k]

    @property
    def times(self) -> tuple[float, ...]:
        return tuple(f.time for f in self.frames)

    @property
    def grid(self) -> GridSpec:
        return self.frames[0].grid


@dataclass(frozen=True)
class StaggerFactors:
    """Spatial (s_h, s_w) and temporal (s_t) decomposition factors."""

    s_h: int = 1
    s_w: int = 1
    s_t: int = 1

    def __post_init__(self) -> None:
        for name in ("s_h", "s_w", "s_t"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")

    @property
    def spatial_count(self) -> int:
        return self.s_h * self.s_w

    @property
    def subtask_count(self) -> int:
        return self.s_h * self.s_w * self.s_t

    def subgrids(self) -> Iterator[tuple[int, int]]:
        for i in range(self.s_h):
            for j in range(self.s_w):
                yield (i, j)

    def subtasks(self) -> Iterator[tuple[int, int, int]]:
        """(i, j, k) in deterministic k-major order."""
        for k in range(self.s_t):
            for i, j in self.subgrids():
                yield (i, j, k)


def coarse_grid(grid: GridSpec, factors: StaggerFactors) -> GridSpec:
    if grid.height % factors.s_h or grid.width % factors.s_w:
        raise ValueError(
            f"factors ({factors.s_h},{factors.s_w}) do not divide grid {grid.shape}"
        )
    return GridSpec(
        height=grid.height // factors.s_h,
        width=grid.width // factors.s_w,
        dx=grid.dx * factors.s_w,
        boundary=grid.boundary,
        dy=grid.row_spacing * factors.s_h,
    )


@dataclass(frozen=True)
class SubfieldArray:
    """The s_h x s_w subfields cut from one fine field."""

    factors: StaggerFactors
    origin_grid: GridSpec
    subfields: tuple[tuple[Field, ...], ...]

    def __post_init__(self) -> None:
        rows = tuple(tuple(r) for r in self.subfields)
        object.__setattr__(self, "subfields", rows)
        f = self.factors
        if len(rows) != f.s_h or any(len(r) != f.s_w for r in rows):
            raise ValueError("subfield array shape does not match factors")
        want = (self.origin_grid.height // f.s_h, self.origin_grid.width // f.s_w)
        for r in rows:
            for sub in r:
                if sub.grid.shape != want:
                    raise ValueError(f"subfield shape {sub.grid.shape}, expected {want}")

    def __getitem__(self, ij: tuple[int, int]) -> Field:
        i, j = ij
        return self.subfields[i][j]


def decompose(field: Field, factors: StaggerFactors) -> SubfieldArray:
    """Cut a fine field into interleaved subgrids. Exact (pure indexing)."""
    grid = field.grid
    cg = coarse_grid(grid, factors)  # also validates divisibility
    rows = []
    for i in range(factors.s_h):
        row = []
        for j in range(factors.s_w):
            row.append(Field(cg, field.values[i :: factors.s_h, j :: factors.s_w], field.time))
        rows.append(tuple(row))
    return SubfieldArray(factors=factors, origin_grid=grid, subfields=tuple(rows))


def reconstruct(sub: SubfieldArray) -> Field:
    """Scatter subgrids back onto the fine grid. Inverse of decompose."""
    f = sub.factors
    grid = sub.origin_grid
    t = sub.subfields[0][0].time
    out = np.empty(grid.shape, dtype=np.float64)
    for i in range(f.s_h):
        for j in range(f.s_w):
            s = sub.subfields[i][j]
            if abs(s.time - t) > TIME_ATOL:
                raise ValueError("subfields disagree on time")
            out[i :: f.s_h, j :: f.s_w] = s.values
    return Field(grid, out, t)


def decompose_values(values: np.ndarray, s_h: int, s_w: int) -> dict[tuple[int, int], np.ndarray]:
    """Raw-array variant used by model plumbing; same index bijection."""
    return {
        (i, j): values[i::s_h, j::s_w] for i in range(s_h) for j in range(s_w)
    }


def reconstruct_values(parts: dict[tuple[int, int], np.ndarray], s_h: int, s_w: int) -> np.ndarray:
    h, w = parts[(0, 0)].shape
    out = np.empty((h * s_h, w * s_w), dtype=np.float64)
    for (i, j), v in parts.items():
        out[i::s_h, j::s_w] = v
    return out


def decompose_temporal(seq: FieldSequence, s_t: int) -> list[tuple[int, Field]]:
    """Split an s_t-frame window into (offset, frame) pairs.

    Offset k holds the frame at time t0 + k*dt; a coarse-in-time solver maps
    it s_t steps forward, to t0 + (k + s_t)*dt.
    """
    if len(seq) != s_t:
        raise ValueError(f"temporal decomposition needs exactly s_t={s_t} frames, got {len(seq)}")
    return [(k, seq[k]) for k in range(s_t)]


def interleave_temporal(predictions: Sequence[Field], dt: float) -> FieldSequence:
    """Assemble per-offset predictions back into one dt-spaced sequence.

    predictions[k] must sit at time t0 + (s_t + k)*dt, i.e. the offsets come
    back in their original order, each advanced by the block length.
    """
    return FieldSequence(frames=tuple(predictions), dt=dt)
