"""Discrete PDE residuals and the staggered physics-constrained loss.

Each residual measures how far a pair of consecutive frames is from
satisfying one implicit/explicit time step of the target equation on the
fine grid. The same formulas run on plain numpy arrays (reference solvers)
and on autodiff tensors (training losses); the backend is picked off the
input type so the two paths cannot drift apart.

Stencils are the standard second-order ones: 5-point Laplacian, central
first differences. Wall-bounded vorticity uses Thom's formula on the walls,
with the moving-lid term on the last row; wall rows take precedence over
wall columns at the four corners.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

from . import autodiff as ad
from .fields import DIRICHLET_LID, Field, FieldSequence, GridSpec, StaggerFactors, decompose_temporal

EXPLICIT = "explicit"
CRANK_NICOLSON = "crank_nicolson"

PERIODIC = "periodic"
DIRICHLET = "dirichlet"
LID_DRIVEN = "lid_driven"


@dataclass(frozen=True)
class DiffusionResidualConfig:
    """du/dt = laplacian(u), explicit or Crank-Nicolson in time."""

    dt: float
    dx: float
    scheme: str = CRANK_NICOLSON
    boundary: str = PERIODIC
    # Dirichlet data: callable t -> (H, W) array or scalar; only the ring is read.
    boundary_values: Callable[[float], np.ndarray | float] | float = 0.0
    dy: float | None = None

    def __post_init__(self) -> None:
        if self.scheme not in (EXPLICIT, CRANK_NICOLSON):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.boundary not in (PERIODIC, DIRICHLET):
            raise ValueError(f"unknown boundary {self.boundary!r}")
        if not (self.dt > 0 and self.dx > 0):
            raise ValueError("dt and dx must be positive")

    @property
    def row_spacing(self) -> float:
        return self.dx if self.dy is None else self.dy

    def boundary_field(self, t: float, shape: tuple[int, int]) -> np.ndarray:
        f = self.boundary_values
        vals = f(t) if callable(f) else f
        return np.broadcast_to(np.asarray(vals, dtype=np.float64), shape)


@dataclass(frozen=True)
class NSResidualConfig:
    """Vorticity-stream Navier-Stokes; the transported state is psi.

    d(omega)/dt = -psi_y*omega_x + psi_x*omega_y + (1/Re)*lap(omega) + f,
    omega = -lap(psi), Crank-Nicolson in time, central differences in space.
    """

    dt: float
    dx: float
    reynolds: float
    boundary: str = PERIODIC
    forcing: np.ndarray | None = None
    lid_speed: float = 1.0
    dy: float | None = None

    def __post_init__(self) -> None:
        if self.boundary not in (PERIODIC, LID_DRIVEN):
            raise ValueError(f"unknown boundary {self.boundary!r}")
        if not (self.dt > 0 and self.dx > 0 and self.reynolds > 0):
            raise ValueError("dt, dx and reynolds must be positive")
        if self.forcing is not None:
            f = np.asarray(self.forcing, dtype=np.float64)
            f.setflags(write=False)
            object.__setattr__(self, "forcing", f)

    @property
    def row_spacing(self) -> float:
        return self.dx if self.dy is None else self.dy


# ------------------------------------------------------- backend dispatch


def _is_tensor(x) -> bool:
    return isinstance(x, ad.Tensor)


def _shift(x, off: int, axis: int):
    if _is_tensor(x):
        return ad.circular_shift(x, off, axis)
    return np.roll(x, off, axis=axis)


def _crop(x, key):
    if _is_tensor(x):
        return ad.crop(x, key)
    return x[key]


def _wrapper(x):
    """Constant-array lift for whichever backend x lives on."""
    if _is_tensor(x):
        return lambda arr: ad.constant(arr)
    return lambda arr: np.asarray(arr, dtype=np.float64)


def laplacian(u, dx: float, dy: float | None = None):
    """5-point Laplacian with circular shifts.

    Exact on periodic grids. On wall grids the values are only meaningful
    away from the wrap-around ring; callers mask or crop accordingly.
    """
    dy = dx if dy is None else dy
    lap_y = (_shift(u, -1, 0) + _shift(u, 1, 0) - 2.0 * u) * (1.0 / (dy * dy))
    lap_x = (_shift(u, -1, 1) + _shift(u, 1, 1) - 2.0 * u) * (1.0 / (dx * dx))
    return lap_y + lap_x


def _grad_x(u, dx: float):
    return (_shift(u, -1, 1) - _shift(u, 1, 1)) * (1.0 / (2.0 * dx))


def _grad_y(u, dy: float):
    return (_shift(u, -1, 0) - _shift(u, 1, 0)) * (1.0 / (2.0 * dy))


@lru_cache(maxsize=64)
def _ring_masks(shape: tuple[int, int]) -> tuple[np.ndarray, ...]:
    """interior, bottom row, top row, left col, right col (rows win corners)."""
    h, w = shape
    interior = np.zeros(shape)
    interior[1 : h - 1, 1 : w - 1] = 1.0
    bottom = np.zeros(shape)
    bottom[0, :] = 1.0
    top = np.zeros(shape)
    top[h - 1, :] = 1.0
    left = np.zeros(shape)
    left[1 : h - 1, 0] = 1.0
    right = np.zeros(shape)
    right[1 : h - 1, w - 1] = 1.0
    for m in (interior, bottom, top, left, right):
        m.setflags(write=False)
    return interior, bottom, top, left, right


# --------------------------------------------------------------- diffusion


def _unwrap(u):
    if isinstance(u, Field):
        return u.values
    return u


def diffusion_residual(u_t, u_next, cfg: DiffusionResidualConfig):
    """Residual of one diffusion step between two frames.

    explicit:        R = (u+ - u)/dt - lap(u)
    crank_nicolson:  R = (u+ - u)/dt - (lap(u) + lap(u+))/2
    Dirichlet rows:  R = u+ - f(t+dt) on the boundary ring.

    Accepts Fields, tensors, or arrays; returns the matching kind.
    """
    as_field = isinstance(u_t, Field)
    t_next = u_t.time + cfg.dt if as_field else None
    a, b = _unwrap(u_t), _unwrap(u_next)
    wrap = _wrapper(a)
    inv_dt = 1.0 / cfg.dt
    if cfg.scheme == EXPLICIT:
        flux = laplacian(a, cfg.dx, cfg.row_spacing)
    else:
        flux = (laplacian(a, cfg.dx, cfg.row_spacing) + laplacian(b, cfg.dx, cfg.row_spacing)) * 0.5
    r = (b - a) * inv_dt - flux
    if cfg.boundary == DIRICHLET:
        shape = a.shape if not _is_tensor(a) else a.data.shape
        interior, bottom, top, left, right = _ring_masks(shape)
        ring = bottom + top + left + right
        if not as_field and callable(cfg.boundary_values):
            raise ValueError("time-dependent Dirichlet data needs Field inputs (they carry time)")
        f_next = cfg.boundary_field(t_next if as_field else 0.0, shape)
        r = wrap(interior) * r + wrap(ring) * (b - wrap(np.array(f_next)))
    if as_field:
        return Field(u_t.grid, r if not _is_tensor(r) else r.data, time=t_next)
    return r


def vorticity_from_stream(psi, cfg: NSResidualConfig):
    """omega = -lap(psi); wall rows/cols from Thom's formula on wall grids.

    Stationary wall: omega_w = -2*(psi_adj - psi_w)/h^2.
    Moving lid (last row, tangential speed U): extra -2*U/h term.
    """
    as_field = isinstance(psi, Field)
    p = _unwrap(psi)
    wrap = _wrapper(p)
    dy = cfg.row_spacing
    if cfg.boundary == PERIODIC:
        w = -1.0 * laplacian(p, cfg.dx, dy)
    else:
        shape = p.shape if not _is_tensor(p) else p.data.shape
        interior, bottom, top, left, right = _ring_masks(shape)
        inner = -1.0 * laplacian(p, cfg.dx, dy)
        up = _shift(p, -1, 0)    # row i+1
        down = _shift(p, 1, 0)   # row i-1
        rightn = _shift(p, -1, 1)
        leftn = _shift(p, 1, 1)
        w = (
            wrap(interior) * inner
            + wrap(bottom) * ((up - p) * (-2.0 / (dy * dy)))
            + wrap(top) * ((down - p) * (-2.0 / (dy * dy)) + wrap(np.full(shape, -2.0 * cfg.lid_speed / dy)))
            + wrap(left) * ((rightn - p) * (-2.0 / (cfg.dx * cfg.dx)))
            + wrap(right) * ((leftn - p) * (-2.0 / (cfg.dx * cfg.dx)))
        )
    if as_field:
        return Field(psi.grid, w if not _is_tensor(w) else w.data, time=psi.time)
    return w


def advection(psi, w, cfg: NSResidualConfig):
    """-psi_y*w_x + psi_x*w_y; central differences (exactly zero grid sum
    on periodic grids, which keeps the mean of the vorticity equation clean)."""
    dy = cfg.row_spacing
    return (
        _grad_x(psi, cfg.dx) * _grad_y(w, dy) - _grad_y(psi, dy) * _grad_x(w, cfg.dx)
    )


def _ns_rhs(p, w, cfg: NSResidualConfig, wrap):
    out = advection(p, w, cfg) + laplacian(w, cfg.dx, cfg.row_spacing) * (1.0 / cfg.reynolds)
    if cfg.forcing is not None:
        out = out + wrap(cfg.forcing)
    return out


def ns_vorticity_residual(psi_t, psi_next, cfg: NSResidualConfig):
    """Crank-Nicolson residual of the vorticity transport between two frames.

    Vorticity is derived from each stream function (walls via Thom), so the
    residual is a function of psi only. Periodic grids return the full-grid
    residual, wall grids the interior (H-2)x(W-2) block.
    """
    as_field = isinstance(psi_t, Field)
    a, b = _unwrap(psi_t), _unwrap(psi_next)
    wrap = _wrapper(a)
    w_t = vorticity_from_stream(a, cfg)
    w_n = vorticity_from_stream(b, cfg)
    rhs = (_ns_rhs(a, w_t, cfg, wrap) + _ns_rhs(b, w_n, cfg, wrap)) * 0.5
    r = (w_n - w_t) * (1.0 / cfg.dt) - rhs
    if cfg.boundary == LID_DRIVEN:
        shape = a.shape if not _is_tensor(a) else a.data.shape
        h, w = shape
        r = _crop(r, (slice(1, h - 1), slice(1, w - 1)))
    if as_field:
        grid = psi_t.grid
        if cfg.boundary == LID_DRIVEN:
            grid = GridSpec(
                height=grid.height - 2,
                width=grid.width - 2,
                dx=grid.dx,
                boundary=grid.boundary,
                dy=grid.dy,
            )
        return Field(grid, r if not _is_tensor(r) else r.data, time=psi_t.time + cfg.dt)
    return r


# ------------------------------------------------------------------- losses


def msr_loss(residuals):
    """Mean squared residual over every entry of every residual given."""
    if isinstance(residuals, (ad.Tensor, np.ndarray, Field)):
        residuals = [residuals]
    residuals = [_unwrap(r) for r in residuals]
    if not residuals:
        raise ValueError("msr_loss needs at least one residual")
    if _is_tensor(residuals[0]):
        count = sum(r.data.size for r in residuals)
        total = None
        for r in residuals:
            s = ad.reduce_sum(ad.square(r))
            total = s if total is None else ad.add(total, s)
        return ad.scale(total, 1.0 / count)
    count = sum(r.size for r in residuals)
    return float(sum(np.sum(r * r) for r in residuals) / count)


@dataclass(frozen=True)
class SubtaskContext:
    """Identity of one coarse solve inside the staggered ensemble."""

    i: int
    j: int
    k: int
    factors: StaggerFactors
    grid: GridSpec
    time: float


ModelFn = Callable[[ad.Tensor, SubtaskContext], ad.Tensor]


def staggered_predictions(
    input_seq: FieldSequence,
    model: ModelFn,
    factors: StaggerFactors,
) -> list[ad.Tensor]:
    """Run every (i, j, k) subtask and reassemble s_t fine-grid frames.

    Offset k's frame feeds the s_h*s_w spatial subtasks; their outputs are
    interleaved back onto the fine grid as the prediction for time
    t0 + (s_t + k)*dt.
    """
    grid = input_seq.grid
    if grid.height % factors.s_h or grid.width % factors.s_w:
        raise ValueError(f"factors do not divide grid {grid.shape}")
    preds: list[ad.Tensor] = []
    for k, frame in decompose_temporal(input_seq, factors.s_t):
        frame_t = ad.constant(frame.values)
        parts = []
        for i in range(factors.s_h):
            for j in range(factors.s_w):
                ctx = SubtaskContext(i=i, j=j, k=k, factors=factors, grid=grid, time=frame.time)
                sub_in = ad.subgrid(frame_t, i, j, factors.s_h, factors.s_w)
                parts.append(model(sub_in, ctx))
        preds.append(ad.interleave2d(parts, factors.s_h, factors.s_w))
    return preds


def staggered_loss(
    input_seq: FieldSequence,
    model: ModelFn,
    factors: StaggerFactors,
    residual_fn: Callable,
) -> ad.Tensor:
    """Physics loss of one staggered window: exactly s_t residual pairs.

    One cross pair ties the last input frame to the first prediction; the
    remaining s_t - 1 pairs tie consecutive predictions. Every pair spans a
    single fine step dt, so residual_fn is the plain fine-grid residual.
    With factors (1,1,1) this reduces bit-for-bit to the undecomposed loss.
    """
    preds = staggered_predictions(input_seq, model, factors)
    chain = [ad.constant(input_seq[factors.s_t - 1].values)] + preds
    residuals = [residual_fn(chain[m], chain[m + 1]) for m in range(factors.s_t)]
    return msr_loss(residuals)
