"""Classical finite-difference solvers used as ground truth.

Three duties: benchmark trajectories for the relative-error metric,
bootstrap frames that seed staggered inference, and the consistency oracle
the residual operators are validated against. The stepping code calls the
same stencil helpers as the residual module, so an oracle (frame, next)
pair drives the matching residual to solver tolerance by construction.

Periodic solves invert the 5-point operator spectrally with its *discrete*
eigenvalues (an exact inverse of the stencil, not a continuum
approximation); wall-bounded solves use matrix-free conjugate gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

from . import residuals as res
from .fields import Field, FieldSequence, GridSpec

DIFFUSION = "diffusion"
NS_PERIODIC = "ns_periodic"
NS_LID_DRIVEN = "ns_lid_driven"

EQUATIONS = (DIFFUSION, NS_PERIODIC, NS_LID_DRIVEN)


class SolverError(RuntimeError):
    """An iterative solve failed to reach its tolerance."""


@dataclass(frozen=True)
class OracleConfig:
    """Numerical parameters for one reference solve.

    dt/dx must agree with the grid the solver is handed; keeping them here
    as well makes configs self-describing in run artifacts. linear_tol is
    the conjugate-gradient target for Crank-Nicolson diffusion steps; it
    defaults below the documented 1e-12 budget to leave residual headroom.
    """

    equation: str
    dt: float
    dx: float
    reynolds: float | None = None
    scheme: str = res.CRANK_NICOLSON
    boundary_values: Callable[[float], np.ndarray | float] | float = 0.0
    forcing: np.ndarray | None = None
    lid_speed: float = 1.0
    burn_in_time: float = 1.98
    picard_tol: float = 1e-10
    picard_max_iters: int = 50
    poisson_tol: float = 1e-10
    linear_tol: float = 1e-13
    dy: float | None = None

    def __post_init__(self) -> None:
        if self.equation not in EQUATIONS:
            raise ValueError(f"unknown equation {self.equation!r}")
        if not (self.dt > 0 and self.dx > 0):
            raise ValueError("dt and dx must be positive")
        for name in ("picard_tol", "poisson_tol", "linear_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.picard_max_iters < 1:
            raise ValueError("picard_max_iters must be at least 1")
        if self.equation != DIFFUSION and not (self.reynolds and self.reynolds > 0):
            raise ValueError("Navier-Stokes solves need a positive reynolds")

    @property
    def row_spacing(self) -> float:
        return self.dx if self.dy is None else self.dy


def residual_config(cfg: OracleConfig, grid: GridSpec):
    """The residual operator config matching an oracle config on a grid."""
    _check_grid(cfg, grid)
    if cfg.equation == DIFFUSION:
        boundary = res.PERIODIC if grid.periodic else res.DIRICHLET
        return res.DiffusionResidualConfig(
            dt=cfg.dt,
            dx=cfg.dx,
            scheme=cfg.scheme,
            boundary=boundary,
            boundary_values=cfg.boundary_values,
            dy=cfg.dy,
        )
    boundary = res.PERIODIC if grid.periodic else res.LID_DRIVEN
    return res.NSResidualConfig(
        dt=cfg.dt,
        dx=cfg.dx,
        reynolds=cfg.reynolds,
        boundary=boundary,
        forcing=cfg.forcing,
        lid_speed=cfg.lid_speed,
        dy=cfg.dy,
    )


def _check_grid(cfg: OracleConfig, grid: GridSpec) -> None:
    if abs(cfg.dx - grid.dx) > 1e-12 or abs(cfg.row_spacing - grid.row_spacing) > 1e-12:
        raise ValueError(
            f"config spacing ({cfg.dx}, {cfg.row_spacing}) does not match "
            f"grid spacing ({grid.dx}, {grid.row_spacing})"
        )
    if cfg.equation == NS_PERIODIC and not grid.periodic:
        raise ValueError("ns_periodic needs a periodic grid")
    if cfg.equation == NS_LID_DRIVEN and grid.periodic:
        raise ValueError("ns_lid_driven needs a wall-bounded grid")
    if cfg.forcing is not None and cfg.forcing.shape != grid.shape:
        raise ValueError(f"forcing shape {cfg.forcing.shape} does not match grid {grid.shape}")


# ------------------------------------------------------- spectral helpers


@lru_cache(maxsize=32)
def _symbols(grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """(lam, lam_safe): non-negative 5-point eigenvalues; safe copy has the
    zero mode replaced by 1 so it can divide."""
    h, w = grid.shape
    ky = (2.0 - 2.0 * np.cos(2.0 * np.pi * np.arange(h) / h)) / grid.row_spacing**2
    kx = (2.0 - 2.0 * np.cos(2.0 * np.pi * np.arange(w) / w)) / grid.dx**2
    lam = ky[:, None] + kx[None, :]
    safe = lam.copy()
    safe[0, 0] = 1.0
    for m in (lam, safe):
        m.setflags(write=False)
    return lam, safe


def _poisson_values(w: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Exact solve of -lap(psi) = w on a periodic grid, zero-mean psi."""
    _, safe = _symbols(grid)
    psih = np.fft.fft2(w) / safe
    psih[0, 0] = 0.0
    return np.real(np.fft.ifft2(psih))


def stream_from_vorticity(w: Field) -> Field:
    if not w.grid.periodic:
        raise ValueError("spectral Poisson solve needs a periodic grid")
    return Field(w.grid, _poisson_values(w.values, w.grid), time=w.time)


def _cg(apply_a, b: np.ndarray, tol: float, what: str) -> np.ndarray:
    """Matrix-free conjugate gradients, zero initial guess.

    Stops when ||b - A x|| <= tol * max(1, ||b||); the operators here are
    SPD (identity minus a scaled Laplacian, or minus a Dirichlet
    Laplacian), so plain CG is the right tool.
    """
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rs = float(np.vdot(r, r).real)
    target = tol * max(1.0, float(np.sqrt(np.vdot(b, b).real)))
    limit = 4 * b.size + 100
    for _ in range(limit):
        if np.sqrt(rs) <= target:
            return x
        ap = apply_a(p)
        alpha = rs / float(np.vdot(p, ap).real)
        x = x + alpha * p
        r = r - alpha * ap
        rs_next = float(np.vdot(r, r).real)
        p = r + (rs_next / rs) * p
        rs = rs_next
    if np.sqrt(rs) <= target:
        return x
    raise SolverError(f"{what}: conjugate gradients stalled at residual {np.sqrt(rs):.3e}")


# ------------------------------------------------------- random fields


@dataclass(frozen=True)
class RandomFieldSpec:
    """Gaussian random field N(0, amplitude * (-lap + shift*I)^(-exponent)).

    The covariance is diagonal in the Fourier basis with the *discrete*
    Laplacian eigenvalues, matching the stencil every residual uses.
    """

    grid: GridSpec
    seed: int
    amplitude: float = 8.0**3
    shift: float = 64.0
    exponent: float = 4.0

    def __post_init__(self) -> None:
        if not self.grid.periodic:
            raise ValueError("random-field sampling needs a periodic grid")
        h, w = self.grid.shape
        if h & (h - 1) or w & (w - 1):
            raise ValueError(f"grid sides must be powers of two, got {h}x{w}")
        if not (self.amplitude > 0 and self.shift > 0):
            raise ValueError("amplitude and shift must be positive")


def sample_random_field(spec: RandomFieldSpec) -> Field:
    """One zero-mean sample; deterministic per seed.

    Complex white noise is Hermitianized as (c + conj(flip(c)))/sqrt(2),
    which keeps every mode's second moment at 2 (self-conjugate modes
    included), so after the final /sqrt(2) the mode at wavenumber k has
    variance amplitude*(lam_k+shift)^(-exponent) exactly, in the
    fft2(values)/(H*W) normalization.
    """
    h, w = spec.grid.shape
    rng = np.random.default_rng(spec.seed)
    noise = rng.standard_normal((2, h, w))
    c = noise[0] + 1j * noise[1]
    flipped = np.conj(np.roll(np.flip(c, axis=(0, 1)), shift=(1, 1), axis=(0, 1)))
    herm = (c + flipped) / np.sqrt(2.0)
    lam, _ = _symbols(spec.grid)
    mult = np.sqrt(spec.amplitude) * (lam + spec.shift) ** (-spec.exponent / 2.0)
    mult[0, 0] = 0.0
    values = np.real(np.fft.ifft2((h * w) * mult * herm / np.sqrt(2.0)))
    return Field(spec.grid, values, time=0.0)


def standard_forcing(grid: GridSpec) -> np.ndarray:
    """The fixed source 0.1*sin(2*pi*(x+y)) + cos(2*pi*(x+y)); zero grid mean."""
    rows = np.arange(grid.height) * grid.row_spacing
    cols = np.arange(grid.width) * grid.dx
    s = 2.0 * np.pi * (rows[:, None] + cols[None, :])
    return 0.1 * np.sin(s) + np.cos(s)


# ------------------------------------------------------- diffusion


def solve_diffusion(u0: Field, steps: int, cfg: OracleConfig) -> FieldSequence:
    """Trajectory of steps+1 frames of du/dt = lap(u).

    Explicit stepping enforces the 2-D stability bound dt*(1/dx^2+1/dy^2)
    <= 1/2; Crank-Nicolson solves its SPD system by conjugate gradients.
    Wall grids pin the boundary ring to the configured Dirichlet data at
    each new time.
    """
    if cfg.equation != DIFFUSION:
        raise ValueError(f"solve_diffusion got equation {cfg.equation!r}")
    grid = u0.grid
    rcfg = residual_config(cfg, grid)
    dx, dy, dt = grid.dx, grid.row_spacing, cfg.dt
    dirichlet = not grid.periodic
    if cfg.scheme == res.EXPLICIT:
        cfl = dt * (1.0 / (dx * dx) + 1.0 / (dy * dy))
        if cfl > 0.5 + 1e-12:
            raise ValueError(f"explicit diffusion is unstable: dt*(1/dx^2+1/dy^2) = {cfl:.4f} > 0.5")
    if dirichlet:
        interior, bottom, top, left, right = res._ring_masks(grid.shape)
        ring = bottom + top + left + right
    c = dt / 2.0
    frames = [u0]
    u = u0.values
    for n in range(steps):
        t_next = u0.time + (n + 1) * dt
        if cfg.scheme == res.EXPLICIT:
            u = u + dt * res.laplacian(u, dx, dy)
            if dirichlet:
                u = interior * u + ring * rcfg.boundary_field(t_next, grid.shape)
        elif not dirichlet:
            b = u + c * res.laplacian(u, dx, dy)
            u = _cg(lambda v: v - c * res.laplacian(v, dx, dy), b, cfg.linear_tol, "diffusion step")
        else:
            fb = ring * rcfg.boundary_field(t_next, grid.shape)
            b = interior * (u + c * res.laplacian(u, dx, dy) + c * res.laplacian(fb, dx, dy))
            x = _cg(
                lambda v: interior * (v - c * res.laplacian(v, dx, dy)),
                b,
                cfg.linear_tol,
                "diffusion step",
            )
            u = x + fb
        frames.append(Field(grid, u, time=t_next))
    return FieldSequence(frames=tuple(frames), dt=dt)


# ------------------------------------------------------- Navier-Stokes


def _ns_step_periodic(
    w: np.ndarray, psi: np.ndarray, grid: GridSpec, rcfg: res.NSResidualConfig, cfg: OracleConfig
) -> tuple[np.ndarray, np.ndarray]:
    """One Crank-Nicolson step by Picard iteration; diffusion implicit
    (exact spectral Helmholtz inverse), advection lagged one iterate."""
    lam, _ = _symbols(grid)
    dt, re_ = cfg.dt, cfg.reynolds
    denom = 1.0 + (dt / (2.0 * re_)) * lam
    explicit = res.advection(psi, w, rcfg) + res.laplacian(w, grid.dx, grid.row_spacing) / re_
    base = w + 0.5 * dt * explicit
    if rcfg.forcing is not None:
        base = base + dt * rcfg.forcing
    w_i, psi_i = w, psi
    for _ in range(cfg.picard_max_iters):
        b = base + 0.5 * dt * res.advection(psi_i, w_i, rcfg)
        w_next = np.real(np.fft.ifft2(np.fft.fft2(b) / denom))
        delta = float(np.max(np.abs(w_next - w_i)))
        w_i = w_next
        psi_i = _poisson_values(w_i, grid)
        if delta <= cfg.picard_tol:
            return w_i, psi_i
    raise SolverError(
        f"Picard iteration did not converge in {cfg.picard_max_iters} passes "
        f"(last update {delta:.3e}, tolerance {cfg.picard_tol:.1e})"
    )


def _ns_step_lid(
    psi: np.ndarray, grid: GridSpec, rcfg: res.NSResidualConfig, cfg: OracleConfig
) -> np.ndarray:
    """One lid-driven step: interior vorticity by CN/Picard with CG solves,
    walls by Thom's formula, stream function by a Dirichlet Poisson solve."""
    interior, bottom, top, left, right = res._ring_masks(grid.shape)
    ring = bottom + top + left + right
    dx, dy, dt, re_ = grid.dx, grid.row_spacing, cfg.dt, cfg.reynolds
    c = dt / (2.0 * re_)
    w_t = res.vorticity_from_stream(psi, rcfg)
    explicit = res.advection(psi, w_t, rcfg) + res.laplacian(w_t, dx, dy) / re_
    base = interior * (w_t + 0.5 * dt * explicit)
    if rcfg.forcing is not None:
        base = base + dt * interior * rcfg.forcing
    w_i, psi_i = w_t, psi
    for _ in range(cfg.picard_max_iters):
        b = base + interior * (
            0.5 * dt * res.advection(psi_i, w_i, rcfg) + c * res.laplacian(ring * w_i, dx, dy)
        )
        w_int = _cg(
            lambda v: interior * (v - c * res.laplacian(v, dx, dy)), b, cfg.linear_tol, "lid step"
        )
        psi_next = _cg(
            lambda v: interior * (-res.laplacian(v, dx, dy)), w_int, cfg.poisson_tol, "lid Poisson"
        )
        w_next = w_int + ring * res.vorticity_from_stream(psi_next, rcfg)
        delta = float(np.max(np.abs(w_next - w_i)))
        w_i, psi_i = w_next, psi_next
        if delta <= cfg.picard_tol:
            return psi_i
    raise SolverError(
        f"Picard iteration did not converge in {cfg.picard_max_iters} passes "
        f"(last update {delta:.3e}, tolerance {cfg.picard_tol:.1e})"
    )


def solve_ns(state0: Field, steps: int, cfg: OracleConfig) -> FieldSequence:
    """Trajectory of steps+1 stream-function frames.

    state0 carries the natural state for the boundary type: the vorticity
    for periodic runs (the stream function is recovered spectrally) and
    the stream function itself for lid-driven runs (walls at rest).
    """
    grid = state0.grid
    rcfg = residual_config(cfg, grid)
    frames = []
    if cfg.equation == NS_PERIODIC:
        w = state0.values
        psi = _poisson_values(w, grid)
        frames.append(Field(grid, psi, time=state0.time))
        for n in range(steps):
            w, psi = _ns_step_periodic(w, psi, grid, rcfg, cfg)
            frames.append(Field(grid, psi, time=state0.time + (n + 1) * cfg.dt))
    elif cfg.equation == NS_LID_DRIVEN:
        psi = state0.values
        frames.append(state0)
        for n in range(steps):
            psi = _ns_step_lid(psi, grid, rcfg, cfg)
            frames.append(Field(grid, psi, time=state0.time + (n + 1) * cfg.dt))
    else:
        raise ValueError(f"solve_ns got equation {cfg.equation!r}")
    return FieldSequence(frames=tuple(frames), dt=cfg.dt)


def solve(state0: Field, steps: int, cfg: OracleConfig) -> FieldSequence:
    """Dispatch on cfg.equation."""
    if cfg.equation == DIFFUSION:
        return solve_diffusion(state0, steps, cfg)
    return solve_ns(state0, steps, cfg)


def prepare_bootstrap(state0: Field, s_t: int, cfg: OracleConfig) -> FieldSequence:
    """The first s_t oracle frames that seed staggered inference.

    Lid-driven runs are first burned in from rest for burn_in_time so the
    returned frames start at a boundary-consistent state; their times are
    T0, T0+dt, ....
    """
    if s_t < 1:
        raise ValueError("s_t must be at least 1")
    if cfg.equation != NS_LID_DRIVEN:
        return solve(state0, s_t - 1, cfg)
    burn_steps = round(cfg.burn_in_time / cfg.dt)
    if abs(burn_steps * cfg.dt - cfg.burn_in_time) > 1e-9:
        raise ValueError(
            f"burn_in_time {cfg.burn_in_time} is not a whole number of steps at dt={cfg.dt}"
        )
    trajectory = solve_ns(state0, burn_steps + s_t - 1, cfg)
    return FieldSequence(frames=trajectory.frames[burn_steps:], dt=cfg.dt)
