"""Analytical instruments: transfer-matrix bandwidth study, the per-block
least-squares equivalence check, MAC accounting, and the Error-k metric.

The bandwidth study materializes the one-step diffusion map as a dense
matrix and watches how far off the diagonal its powers reach; the
least-squares check compares the minimum-norm linear predictor fitted on
full states against predictors fitted per interleaved block.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import residuals as res
from .fields import Field, FieldSequence, GridSpec, StaggerFactors, TIME_ATOL
from .models import ModelSpec

STRUCTURAL_THRESHOLD = 1e-14
RANK_RTOL = 1e-10
DENSE_CAP = 4096


# ----------------------------------------------------------- transfer matrix


@dataclass(frozen=True)
class BandMatrix:
    """Dense d x d one-step map with its recorded bandwidth."""

    d: int
    dense: np.ndarray
    bandwidth: int
    scheme: str
    boundary: str

    def apply(self, values: np.ndarray) -> np.ndarray:
        """Matrix-vector product on a flattened (or 1-D) state."""
        return (self.dense @ values.reshape(-1)).reshape(values.shape)


def matrix_bandwidth(a: np.ndarray, threshold: float = STRUCTURAL_THRESHOLD) -> int:
    """max |i - j| over entries with |a_ij| > threshold; 0 for no entries."""
    rows, cols = np.nonzero(np.abs(a) > threshold)
    if rows.size == 0:
        return 0
    return int(np.max(np.abs(rows - cols)))


def _laplacian_1d(d: int, dx: float, periodic: bool) -> np.ndarray:
    lap = np.zeros((d, d))
    inv = 1.0 / (dx * dx)
    for p in range(d):
        lap[p, p] = -2.0 * inv
        if periodic:
            lap[p, (p - 1) % d] += inv
            lap[p, (p + 1) % d] += inv
        else:
            # all d points are unknowns; Dirichlet data sits outside the chain
            if p > 0:
                lap[p, p - 1] += inv
            if p < d - 1:
                lap[p, p + 1] += inv
    return lap


def _laplacian_2d(grid: GridSpec) -> np.ndarray:
    """Lexicographic Laplacian matching the stencil of the residual module.

    Periodic grids reproduce the wrapped stencil row for row. Wall grids
    build the boundary-reduced operator: every stored point is an unknown
    and the homogeneous Dirichlet data outside the grid drops out, which
    keeps the matrix banded and lets its powers fill in.
    """
    h, w = grid.height, grid.width
    d = h * w
    ix = 1.0 / (grid.dx * grid.dx)
    iy = 1.0 / (grid.row_spacing * grid.row_spacing)
    lap = np.zeros((d, d))
    for r in range(h):
        for c in range(w):
            p = r * w + c
            lap[p, p] = -2.0 * (ix + iy)
            if grid.periodic:
                lap[p, ((r - 1) % h) * w + c] += iy
                lap[p, ((r + 1) % h) * w + c] += iy
                lap[p, r * w + (c - 1) % w] += ix
                lap[p, r * w + (c + 1) % w] += ix
            else:
                if r > 0:
                    lap[p, (r - 1) * w + c] += iy
                if r < h - 1:
                    lap[p, (r + 1) * w + c] += iy
                if c > 0:
                    lap[p, r * w + c - 1] += ix
                if c < w - 1:
                    lap[p, r * w + c + 1] += ix
    return lap


def build_transfer_matrix(grid: GridSpec | int, cfg: res.DiffusionResidualConfig) -> BandMatrix:
    """One-step diffusion map as a dense matrix.

    Explicit: T = I + dt*L. Crank-Nicolson: T = (I - dt/2 L)^-1 (I + dt/2 L).
    A GridSpec builds the 2-D lexicographic operator; an integer builds the
    1-D chain of that many points.
    """
    if isinstance(grid, GridSpec):
        d = grid.height * grid.width
        if d > DENSE_CAP:
            raise ValueError(f"dense transfer matrix needs d <= {DENSE_CAP}, got {d}")
        lap = _laplacian_2d(grid)
        boundary = grid.boundary
    else:
        d = int(grid)
        if d < 2:
            raise ValueError("1-D transfer matrix needs at least 2 points")
        if d > DENSE_CAP:
            raise ValueError(f"dense transfer matrix needs d <= {DENSE_CAP}, got {d}")
        periodic = cfg.boundary == res.PERIODIC
        lap = _laplacian_1d(d, cfg.dx, periodic)
        boundary = cfg.boundary
    eye = np.eye(d)
    if cfg.scheme == res.EXPLICIT:
        dense = eye + cfg.dt * lap
    else:
        dense = np.linalg.solve(eye - 0.5 * cfg.dt * lap, eye + 0.5 * cfg.dt * lap)
    return BandMatrix(
        d=d,
        dense=dense,
        bandwidth=matrix_bandwidth(dense),
        scheme=cfg.scheme,
        boundary=boundary,
    )


@dataclass(frozen=True)
class BandwidthStudy:
    """Bandwidth of T^k for k = 1..k_max plus derived structure markers."""

    ks: tuple[int, ...]
    bandwidths: tuple[int, ...]
    k_dense: int | None
    fit_window: tuple[int, int]
    fit_slope: float
    fit_intercept: float
    fit_r_squared: float


def _affine_fit(ks: Sequence[int], bws: Sequence[int]) -> tuple[float, float, float]:
    ks = np.asarray(ks, dtype=np.float64)
    bws = np.asarray(bws, dtype=np.float64)
    if ks.size == 1:
        return float(bws[0] / ks[0]), 0.0, 1.0
    slope, intercept = np.polyfit(ks, bws, 1)
    predicted = slope * ks + intercept
    ss_res = float(np.sum((bws - predicted) ** 2))
    ss_tot = float(np.sum((bws - np.mean(bws)) ** 2))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return float(slope), float(intercept), r2


def transfer_power_bandwidth(transfer: BandMatrix, k_max: int) -> BandwidthStudy:
    """Bandwidth of the k-step maps T^k.

    k_dense is the first k at which no structural zeros remain (None if
    that never happens up to k_max). The affine fit runs over the linear
    prefix, the maximal leading window with bandwidth(k) = k*bandwidth(1),
    the growth phase before boundary effects or saturation bend the curve.
    """
    if transfer.scheme != res.EXPLICIT:
        raise ValueError("the power study needs the banded explicit-scheme matrix")
    if k_max < 1:
        raise ValueError("k_max must be at least 1")
    ks = list(range(1, k_max + 1))
    bandwidths: list[int] = []
    k_dense: int | None = None
    power = np.eye(transfer.d)
    for k in ks:
        power = power @ transfer.dense
        bandwidths.append(matrix_bandwidth(power))
        if k_dense is None and np.all(np.abs(power) > STRUCTURAL_THRESHOLD):
            k_dense = k
    b1 = bandwidths[0]
    prefix = 1
    while prefix < len(ks) and bandwidths[prefix] == (prefix + 1) * b1:
        prefix += 1
    slope, intercept, r2 = _affine_fit(ks[:prefix], bandwidths[:prefix])
    return BandwidthStudy(
        ks=tuple(ks),
        bandwidths=tuple(bandwidths),
        k_dense=k_dense,
        fit_window=(1, prefix),
        fit_slope=slope,
        fit_intercept=intercept,
        fit_r_squared=r2,
    )


# -------------------------------------------------------- block equivalence


@dataclass(frozen=True)
class Prop1Report:
    """Full-state vs per-block least-squares comparison."""

    n_samples: int
    d: int
    blocks: int
    rank_full: int
    block_ranks: tuple[int, ...]
    gaps: tuple[float, ...]
    verdict: str


def _numerical_rank(a: np.ndarray) -> int:
    if not np.any(a):
        return 0
    sigma = np.linalg.svd(a, compute_uv=False)
    return int(np.sum(sigma > RANK_RTOL * sigma[0]))


def prop1_verify(samples: np.ndarray, targets: np.ndarray, blocks: int) -> Prop1Report:
    """Compare the minimum-norm predictor on full states against the
    predictors fitted on each interleaved column block.

    Block b holds columns b, b+blocks, b+2*blocks, ... (the width
    interleaving of the spatial decomposition). The verdict is "equal" when
    every block matches the full rank and every prediction gap (Frobenius
    norm of the difference on the training targets) stays below 1e-8.
    """
    samples = np.asarray(samples, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if samples.ndim != 2:
        raise ValueError("samples must be a 2-D (N x d) matrix")
    if targets.ndim == 1:
        targets = targets[:, None]
    if targets.shape[0] != samples.shape[0]:
        raise ValueError("samples and targets disagree on the sample count")
    n, d = samples.shape
    if blocks < 1 or d % blocks:
        raise ValueError(f"d={d} is not divisible into {blocks} blocks")
    full_pred = samples @ (np.linalg.pinv(samples) @ targets)
    rank_full = _numerical_rank(samples)
    block_ranks: list[int] = []
    gaps: list[float] = []
    for b in range(blocks):
        x_b = samples[:, b::blocks]
        block_pred = x_b @ (np.linalg.pinv(x_b) @ targets)
        block_ranks.append(_numerical_rank(x_b))
        gaps.append(float(np.linalg.norm(full_pred - block_pred)))
    equal = all(r == rank_full for r in block_ranks) and all(g < 1e-8 for g in gaps)
    return Prop1Report(
        n_samples=n,
        d=d,
        blocks=blocks,
        rank_full=rank_full,
        block_ranks=tuple(block_ranks),
        gaps=tuple(gaps),
        verdict="equal" if equal else "different",
    )


def prop1_equal_case(n: int, d: int, blocks: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Data where each block determines the whole row: every block carries
    the same columns, so block predictors match the full one."""
    if d % blocks:
        raise ValueError(f"d={d} is not divisible into {blocks} blocks")
    rng = np.random.default_rng(seed)
    core = rng.normal(size=(n, d // blocks))
    samples = np.zeros((n, d))
    for b in range(blocks):
        samples[:, b::blocks] = core
    targets = rng.normal(size=(n, 1))
    return samples, targets


def prop1_generic_case(n: int, d: int, blocks: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Generic full-rank data with realizable targets: the full predictor
    fits them exactly, the narrower block predictors cannot."""
    if d % blocks:
        raise ValueError(f"d={d} is not divisible into {blocks} blocks")
    rng = np.random.default_rng(seed)
    samples = rng.normal(size=(n, d))
    mixing = rng.normal(size=(d, 1))
    return samples, samples @ mixing


# ------------------------------------------------------------- MAC counting


@dataclass(frozen=True)
class GmacsReport:
    """Multiply-accumulate accounting for one staggered configuration.

    All counts are exact integers; per_card * workers == total always.
    """

    per_layer_macs: tuple[tuple[str, int], ...]
    per_subtask_macs: int
    subtask_count: int
    workers: int
    total_step_macs: int
    per_card_step_macs: int
    ensemble_steps: int
    horizon_total_macs: int
    horizon_per_card_macs: int
    fold_vs_baseline: int


def count_gmacs(
    spec: ModelSpec,
    grid: GridSpec,
    factors: StaggerFactors,
    horizon_steps: int,
) -> GmacsReport:
    """Exact MAC counts: a conv layer costs h*w*C_in*C_out*k^2 on the coarse
    shape; the horizon runs horizon/s_t ensemble steps. The fold column
    compares against the same spec undecomposed over the same horizon."""
    if grid.height % factors.s_h or grid.width % factors.s_w:
        raise ValueError(f"factors do not divide grid {grid.shape}")
    if horizon_steps < 1 or horizon_steps % factors.s_t:
        raise ValueError(f"horizon_steps={horizon_steps} is not a multiple of s_t={factors.s_t}")
    h = grid.height // factors.s_h
    w = grid.width // factors.s_w
    k2 = spec.kernel_size**2
    per_layer: list[tuple[str, int]] = []
    for name, shape in spec.layer_shapes():
        if name.endswith(".weight"):
            c_out, c_in = shape[0], shape[1]
            per_layer.append((name, h * w * c_in * c_out * k2))
    per_subtask = sum(macs for _, macs in per_layer)
    workers = factors.subtask_count
    total_step = per_subtask * workers
    ensemble_steps = horizon_steps // factors.s_t
    horizon_total = total_step * ensemble_steps
    horizon_per_card = per_subtask * ensemble_steps
    baseline_per_card = (grid.height * grid.width // (h * w)) * per_subtask * horizon_steps
    if baseline_per_card % horizon_per_card:
        raise AssertionError("fold is not exact; the cost model must be resolution-proportional")
    return GmacsReport(
        per_layer_macs=tuple(per_layer),
        per_subtask_macs=per_subtask,
        subtask_count=workers,
        workers=workers,
        total_step_macs=total_step,
        per_card_step_macs=total_step // workers,
        ensemble_steps=ensemble_steps,
        horizon_total_macs=horizon_total,
        horizon_per_card_macs=horizon_per_card,
        fold_vs_baseline=baseline_per_card // horizon_per_card,
    )


# ----------------------------------------------------------------- Error-k


def relative_error(pred: Field, truth: Field) -> float:
    """||pred - truth||_2 / ||truth||_2 on matching grids."""
    if pred.grid != truth.grid:
        raise ValueError("prediction and truth live on different grids")
    scale = float(np.linalg.norm(truth.values))
    if scale == 0.0:
        raise ValueError("relative error is undefined for zero-norm truth")
    return float(np.linalg.norm(pred.values - truth.values)) / scale


def error_k(prediction: FieldSequence, truth: FieldSequence, k: int) -> float:
    """Relative error of the frame at the truth's k-th time.

    Frames are matched by time, so the two sequences may carry different
    leading frames as long as both cover t_k.
    """
    if not (0 <= k < len(truth)):
        raise ValueError(f"truth has {len(truth)} frames, no frame {k}")
    target = truth[k]
    for frame in prediction.frames:
        if abs(frame.time - target.time) <= TIME_ATOL:
            return relative_error(frame, target)
    raise ValueError(f"prediction has no frame at time {target.time}")
