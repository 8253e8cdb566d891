"""Physics-constrained training of the staggered ensemble.

Adam with a stepped learning-rate decay drives the shared coarse-solver
parameters against the staggered residual loss; training data is a pool of
s_t-frame windows that can grow with the model's own (optionally
oracle-corrected) predictions. Rollouts run auto-regressively in blocks of
s_t frames, and the same differentiable path powers the inverse-problem
demo that optimizes an input under a frozen model.
"""

from __future__ import annotations

import csv
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import oracles
from . import residuals as res
from .fields import Field, FieldSequence, GridSpec, StaggerFactors, coarse_grid
from .models import AuxChannelSpec, ModelParams, ModelSpec, ensemble_forward, init_params, make_model_fn
from .residuals import SubtaskContext, staggered_loss

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

DATA_STREAM = 0
INIT_STREAM = 1
BATCH_STREAM = 2


class TrainingError(RuntimeError):
    """Raised when training cannot continue (divergence, bad gradients)."""


def seed_stream(seed: int, stream_id: int) -> np.random.SeedSequence:
    """Named sub-stream of an experiment seed; keeps data, init and batch
    draws independent of each other."""
    return np.random.SeedSequence([seed, stream_id])


# ------------------------------------------------------------------- pool


@dataclass(frozen=True)
class PoolConfig:
    """Enrichment policy. evolving=False freezes the pool (fixed dataset)."""

    evolving: bool = False
    enrich_threshold: float = 1e-4
    window: int = 200
    correct: bool = False
    max_size: int | None = None

    def __post_init__(self) -> None:
        if self.window < 1:
            raise ValueError("window must be at least 1")
        if not (self.enrich_threshold > 0):
            raise ValueError("enrich_threshold must be positive")
        if self.max_size is not None and self.max_size < 1:
            raise ValueError("max_size must be positive when set")


class TrainingPool:
    """Windows of exactly s_t consecutive fine-grid frames.

    Entries appended by enrichment form the frontier, the newest
    generation; the next enrichment advances only the frontier, so pool
    growth is linear while its time coverage extends one block per round.
    """

    def __init__(self, entries: Sequence[FieldSequence], s_t: int):
        entries = list(entries)
        if not entries:
            raise ValueError("pool needs at least one entry")
        if s_t < 1:
            raise ValueError("s_t must be at least 1")
        self.s_t = s_t
        self.entries: list[FieldSequence] = []
        self.frontier_start = 0
        for e in entries:
            self._check(e)
            self.entries.append(e)

    def _check(self, entry: FieldSequence) -> None:
        if len(entry) != self.s_t:
            raise ValueError(f"pool entries need exactly s_t={self.s_t} frames, got {len(entry)}")
        if self.entries:
            head = self.entries[0]
            if entry.grid != head.grid:
                raise ValueError("pool entries must share one grid")
            if abs(entry.dt - head.dt) > 1e-15:
                raise ValueError("pool entries must share one dt")

    def append(self, entry: FieldSequence) -> None:
        self._check(entry)
        self.entries.append(entry)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def grid(self) -> GridSpec:
        return self.entries[0].grid

    @property
    def dt(self) -> float:
        return self.entries[0].dt

    @property
    def frontier(self) -> list[FieldSequence]:
        return self.entries[self.frontier_start :]

    def sample(self, rng: np.random.Generator, batch_size: int) -> list[FieldSequence]:
        idx = rng.integers(0, len(self.entries), size=batch_size)
        return [self.entries[int(i)] for i in idx]


def trajectory_windows(seq: FieldSequence, s_t: int, stride: int = 1) -> list[FieldSequence]:
    """All s_t-frame pool entries cut from one trajectory.

    Window starts step by `stride` frames; stride=s_t tiles the trajectory
    without overlap. Training on windows drawn along reference runs puts
    the loss where rollouts will actually visit, instead of only at t=0.
    """
    if s_t < 1 or stride < 1:
        raise ValueError("s_t and stride must be at least 1")
    if len(seq) < s_t:
        raise ValueError(f"trajectory has {len(seq)} frames, windows need {s_t}")
    out = []
    for start in range(0, len(seq) - s_t + 1, stride):
        out.append(FieldSequence(frames=seq.frames[start : start + s_t], dt=seq.dt))
    return out


def _oracle_resolve(first: Field, steps: int, cfg: oracles.OracleConfig) -> tuple[Field, ...]:
    """Re-solve a predicted window from its first frame with the oracle."""
    if cfg.equation == oracles.NS_PERIODIC:
        rcfg = oracles.residual_config(cfg, first.grid)
        w0 = res.vorticity_from_stream(first, rcfg)
        return oracles.solve_ns(w0, steps, cfg).frames
    return oracles.solve(first, steps, cfg).frames


def enrich_pool(
    pool: TrainingPool,
    model,
    factors: StaggerFactors,
    policy: PoolConfig,
    oracle_cfg: oracles.OracleConfig | None = None,
    aux: AuxChannelSpec = AuxChannelSpec(),
) -> int:
    """Advance the pool frontier by one predicted block per entry.

    Each frontier window gets a follow-on window of s_t predicted frames
    (times advanced by s_t*dt) appended. With policy.correct on, the
    predicted frames are replaced by an oracle re-solve from the first
    predicted frame, so every appended pair satisfies the stepping
    residual. Returns the number of entries appended.
    """
    if not policy.evolving:
        return 0
    if policy.correct and oracle_cfg is None:
        raise ValueError("pool correction needs an oracle config")
    model_fn = _as_model_fn(model, aux)
    frontier = pool.frontier
    pool.frontier_start = len(pool.entries)
    appended = 0
    for entry in frontier:
        if policy.max_size is not None and len(pool.entries) >= policy.max_size:
            break
        rolled = rollout(model_fn, entry, factors.s_t, factors)
        frames = rolled.frames[factors.s_t :]
        if policy.correct:
            frames = _oracle_resolve(frames[0], factors.s_t - 1, oracle_cfg)
        pool.append(FieldSequence(frames=tuple(frames), dt=pool.dt))
        appended += 1
    return appended


# ------------------------------------------------------------------- Adam


class AdamState:
    """First/second moment tensors and the shared step counter."""

    def __init__(self, shapes: dict[str, tuple[int, ...]]):
        self.m = {name: np.zeros(shape) for name, shape in shapes.items()}
        self.v = {name: np.zeros(shape) for name, shape in shapes.items()}
        self.step = 0

    @classmethod
    def for_params(cls, params: ModelParams) -> "AdamState":
        return cls({name: t.shape for name, t in params.items()})


def adam_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> None:
    """One bias-corrected Adam update, in place on the parameter tensors."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        if g.shape != p.shape:
            raise TrainingError(f"gradient shape {g.shape} does not match {name} {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r} at step {t}")
        m = state.m[name]
        v = state.v[name]
        m[...] = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v[...] = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g
        m_hat = m / (1.0 - ADAM_BETA1**t)
        v_hat = v / (1.0 - ADAM_BETA2**t)
        p.data[...] = p.data - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their joint 2-norm is at most max_norm;
    returns the pre-clip norm."""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


# ------------------------------------------------------------------- config


@dataclass(frozen=True)
class TrainConfig:
    factors: StaggerFactors
    oracle: oracles.OracleConfig
    model: ModelSpec = ModelSpec()
    aux: AuxChannelSpec = field(default_factory=AuxChannelSpec)
    lr0: float = 3e-3
    lr_decay: float = 0.9
    decay_every: int = 5000
    batch_size: int = 4
    iterations: int = 1000
    seed: int = 0
    grad_clip: float = 1.0
    divergence_threshold: float = 1e6
    pool: PoolConfig = field(default_factory=PoolConfig)
    workers: int = 1

    def __post_init__(self) -> None:
        if not (self.lr0 > 0):
            raise ValueError("lr0 must be positive")
        if not (0 < self.lr_decay <= 1):
            raise ValueError("lr_decay must be in (0, 1]")
        if self.decay_every < 1:
            raise ValueError("decay_every must be at least 1")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        want = 1 + self.aux.channel_count
        if self.model.in_channels != want:
            raise ValueError(
                f"model.in_channels is {self.model.in_channels} but state + aux channels need {want}"
            )


def learning_rate(cfg: TrainConfig, iteration: int) -> float:
    """lr0 * lr_decay^floor(iteration / decay_every), exactly."""
    return cfg.lr0 * cfg.lr_decay ** (iteration // cfg.decay_every)


@dataclass(frozen=True)
class HistoryRow:
    iteration: int
    loss: float
    lr: float
    pool_size: int
    wall_ms: float


def write_history_csv(path: str | Path, rows: Sequence[HistoryRow]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss", "lr", "pool_size", "wall_ms"])
        for r in rows:
            writer.writerow([r.iteration, repr(r.loss), repr(r.lr), r.pool_size, f"{r.wall_ms:.3f}"])


@dataclass
class TrainResult:
    params: ModelParams
    history: list[HistoryRow]
    best_loss: float
    best_iteration: int


# ------------------------------------------------------------------- train


def residual_fn_for(cfg: oracles.OracleConfig, grid: GridSpec) -> Callable:
    """Plain fine-grid pair residual for the configured equation."""
    rcfg = oracles.residual_config(cfg, grid)
    if cfg.equation == oracles.DIFFUSION:
        return lambda u_t, u_next: res.diffusion_residual(u_t, u_next, rcfg)
    return lambda p_t, p_next: res.ns_vorticity_residual(p_t, p_next, rcfg)


def train(pool: TrainingPool, cfg: TrainConfig) -> TrainResult:
    """Iterate batch -> staggered loss -> backward -> clip -> adam.

    Bit-deterministic for a fixed (seed, config) at one worker: batches come
    from the dedicated batch stream and gradients reduce in graph order.
    Returns the lowest-loss parameters seen, not the last iterate.
    """
    if pool.s_t != cfg.factors.s_t:
        raise ValueError(f"pool windows have s_t={pool.s_t}, factors need {cfg.factors.s_t}")
    if abs(pool.dt - cfg.oracle.dt) > 1e-15:
        raise ValueError(f"pool dt {pool.dt} does not match oracle dt {cfg.oracle.dt}")
    grid = pool.grid
    if grid.height % cfg.factors.s_h or grid.width % cfg.factors.s_w:
        raise ValueError(f"factors do not divide grid {grid.shape}")

    params = init_params(cfg.model, seed_stream(cfg.seed, INIT_STREAM))
    model_fn = make_model_fn(params, cfg.aux)
    residual_fn = residual_fn_for(cfg.oracle, grid)
    batch_rng = np.random.default_rng(seed_stream(cfg.seed, BATCH_STREAM))
    state = AdamState.for_params(params)
    tensors = [t for _, t in params.items()]

    history: list[HistoryRow] = []
    recent: deque[float] = deque(maxlen=cfg.pool.window)
    best_loss = np.inf
    best_iteration = -1
    best_values: dict[str, np.ndarray] | None = None
    last_enrich = -1

    for n in range(cfg.iterations):
        started = time.perf_counter()
        lr = learning_rate(cfg, n)
        batch = pool.sample(batch_rng, cfg.batch_size)
        losses = [staggered_loss(entry, model_fn, cfg.factors, residual_fn) for entry in batch]
        loss = losses[0]
        for extra in losses[1:]:
            loss = ad.add(loss, extra)
        if len(losses) > 1:
            loss = ad.scale(loss, 1.0 / len(losses))
        loss_value = loss.item()
        if not np.isfinite(loss_value):
            raise TrainingError(f"loss is not finite at iteration {n}")
        if loss_value > cfg.divergence_threshold:
            raise TrainingError(
                f"training diverged at iteration {n}: loss {loss_value:.3e} exceeds "
                f"{cfg.divergence_threshold:.1e}"
            )

        if loss_value < best_loss:
            # the loss belongs to the parameters before this step's update
            best_loss = loss_value
            best_iteration = n
            best_values = params.values_snapshot()

        ad.zero_grads(tensors)
        ad.backward(loss)
        grads = {
            name: (t.grad if t.grad is not None else np.zeros(t.shape)) for name, t in params.items()
        }
        clip_global_norm(grads, cfg.grad_clip)
        adam_step(params, grads, state, lr)

        recent.append(loss_value)
        if (
            cfg.pool.evolving
            and len(recent) == cfg.pool.window
            and n - last_enrich >= cfg.pool.window
            and float(np.mean(recent)) < cfg.pool.enrich_threshold
        ):
            enrich_pool(pool, model_fn, cfg.factors, cfg.pool, cfg.oracle, cfg.aux)
            last_enrich = n

        wall_ms = (time.perf_counter() - started) * 1000.0
        history.append(
            HistoryRow(iteration=n, loss=loss_value, lr=lr, pool_size=len(pool), wall_ms=wall_ms)
        )

    if best_values is not None:
        params.load_values(best_values)
    return TrainResult(params=params, history=history, best_loss=best_loss, best_iteration=best_iteration)


# ------------------------------------------------------------------- rollout


def _as_model_fn(model, aux: AuxChannelSpec):
    if isinstance(model, ModelParams):
        return make_model_fn(model, aux)
    return model


def _predict_block(
    model_fn,
    frames: list[ad.Tensor],
    times: list[float],
    grid: GridSpec,
    factors: StaggerFactors,
    dt: float,
    workers: int,
) -> tuple[list[ad.Tensor], list[float]]:
    """One staggered step: s_t input frames -> s_t frames one block later."""
    tasks = []
    for k in range(factors.s_t):
        for i in range(factors.s_h):
            for j in range(factors.s_w):
                ctx = SubtaskContext(i=i, j=j, k=k, factors=factors, grid=grid, time=times[k])
                tasks.append((ctx, ad.subgrid(frames[k], i, j, factors.s_h, factors.s_w)))
    results = ensemble_forward(model_fn, tasks, factors=factors, workers=workers)
    spatial = factors.s_h * factors.s_w
    preds = [
        ad.interleave2d(results[k * spatial : (k + 1) * spatial], factors.s_h, factors.s_w)
        for k in range(factors.s_t)
    ]
    new_times = [times[k] + factors.s_t * dt for k in range(factors.s_t)]
    return preds, new_times


def rollout(
    model,
    init: FieldSequence,
    n_steps: int,
    factors: StaggerFactors,
    aux: AuxChannelSpec = AuxChannelSpec(),
    workers: int = 1,
) -> FieldSequence:
    """Auto-regressive staggered rollout in blocks of s_t frames.

    init holds the s_t bootstrap frames; the result is init plus n_steps
    predicted frames at the fine step dt. n_steps must be a whole number of
    blocks: callers wanting a partial block pad up and slice.
    """
    if len(init) != factors.s_t:
        raise ValueError(f"rollout needs s_t={factors.s_t} initial frames, got {len(init)}")
    if n_steps < 0 or n_steps % factors.s_t:
        raise ValueError(f"n_steps={n_steps} is not a multiple of s_t={factors.s_t}")
    model_fn = _as_model_fn(model, aux)
    grid = init.grid
    dt = init.dt
    frames_t = [ad.constant(f.values) for f in init.frames]
    times = list(init.times)
    out: list[Field] = list(init.frames)
    for _ in range(n_steps // factors.s_t):
        preds, times = _predict_block(model_fn, frames_t, times, grid, factors, dt, workers)
        out.extend(Field(grid, p.data.copy(), time=t) for p, t in zip(preds, times))
        frames_t = [ad.constant(p.data) for p in preds]
    return FieldSequence(frames=tuple(out), dt=dt)


def coarse_rollout(
    model,
    init: Field,
    n_blocks: int,
    grid: GridSpec,
    factors: StaggerFactors,
    i: int,
    j: int,
    k: int,
    dt: float,
    aux: AuxChannelSpec = AuxChannelSpec(),
) -> FieldSequence:
    """Standalone coarse-resolution solve on subgrid (i, j) at offset k.

    init is that subgrid's frame; each block advances it by the coarse step
    s_t*dt. Equals the (i, j, k) stagger component of rollout bit for bit
    when both start from the same decomposed state.
    """
    sub_shape = (grid.height // factors.s_h, grid.width // factors.s_w)
    if init.values.shape != sub_shape:
        raise ValueError(f"init shape {init.values.shape} does not match coarse shape {sub_shape}")
    model_fn = _as_model_fn(model, aux)
    cgrid = coarse_grid(grid, factors)
    x = ad.constant(init.values)
    t = init.time
    frames = [Field(cgrid, init.values, time=t)]
    for _ in range(n_blocks):
        ctx = SubtaskContext(i=i, j=j, k=k, factors=factors, grid=grid, time=t)
        y = model_fn(x, ctx)
        t = t + factors.s_t * dt
        frames.append(Field(cgrid, y.data.copy(), time=t))
        x = ad.constant(y.data)
    return FieldSequence(frames=tuple(frames), dt=factors.s_t * dt)


def rollout_tensor(
    model_fn,
    x0: ad.Tensor,
    init_time: float,
    n_steps: int,
    grid: GridSpec,
    factors: StaggerFactors,
    dt: float,
) -> list[ad.Tensor]:
    """Differentiable rollout from a single fine-grid tensor.

    The graph stays connected from x0 through every predicted frame, so
    gradients flow back to the input; requires s_t == 1 (one frame seeds
    the whole trajectory).
    """
    if factors.s_t != 1:
        raise ValueError("differentiable single-frame rollout needs s_t == 1")
    if n_steps < 0:
        raise ValueError("n_steps must be non-negative")
    frames = [x0]
    times = [init_time]
    out: list[ad.Tensor] = []
    for _ in range(n_steps):
        frames, times = _predict_block(model_fn, frames, times, grid, factors, dt, workers=1)
        out.append(frames[0])
    return out


def optimize_input(
    objective: Callable[[ad.Tensor], ad.Tensor],
    x0: np.ndarray,
    steps: int,
    lr: float = 1e-2,
) -> tuple[np.ndarray, list[float]]:
    """Adam on the input of a frozen differentiable pipeline.

    objective maps an input tensor to a scalar tensor; the lowest-objective
    input seen is returned together with the full objective trace (steps + 1
    values, the last being the returned input's objective).
    """
    if steps < 0:
        raise ValueError("steps must be non-negative")
    x = ad.tensor(np.array(x0, dtype=np.float64, copy=True), requires_grad=True)
    m = np.zeros(x.shape)
    v = np.zeros(x.shape)
    trace: list[float] = []
    best_value = np.inf
    best_input = x.data.copy()
    for t in range(1, steps + 1):
        ad.zero_grads([x])
        value = objective(x)
        value_f = value.item()
        if not np.isfinite(value_f):
            raise TrainingError(f"objective is not finite at step {t - 1}")
        trace.append(value_f)
        if value_f < best_value:
            best_value = value_f
            best_input = x.data.copy()
        ad.backward(value)
        g = x.grad if x.grad is not None else np.zeros(x.shape)
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite input gradient at step {t - 1}")
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g
        m_hat = m / (1.0 - ADAM_BETA1**t)
        v_hat = v / (1.0 - ADAM_BETA2**t)
        x.data[...] = x.data - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    final = objective(ad.constant(x.data)).item()
    trace.append(final)
    if final < best_value:
        best_value = final
        best_input = x.data.copy()
    return best_input, trace
