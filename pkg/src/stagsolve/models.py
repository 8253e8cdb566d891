"""The lightweight shared-parameter coarse solver and its input features.

One compact convolutional network serves every (i, j, k) subtask; all
subtasks read the same parameter tensors, so one optimizer step moves
every coarse solver identically. The final layer is zero-initialized and
the network predicts a delta by default, making the identity map the
starting point of physics-constrained training.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import snapshots
from .fields import Field, GridSpec, StaggerFactors
from .residuals import SubtaskContext, _shift, _wrapper

AUX_NONE = "none"
AUX_NORMALIZED_COORDS = "normalized_coords"
AUX_SINUSOIDAL_PE = "sinusoidal_pe"
AUX_VORTICITY = "vorticity"

_AUX_MODES = (AUX_NONE, AUX_NORMALIZED_COORDS, AUX_SINUSOIDAL_PE, AUX_VORTICITY)


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of the coarse solver: depth gelu conv layers of
    hidden_channels feeding one linear output conv.

    zero_mean_delta projects the network output onto the zero-mean
    slice. The periodic stream function is only defined up to a
    constant and the reference solver pins that gauge to zero mean; a
    vorticity-based residual cannot see the constant mode, so without
    the projection training lets it drift freely and rollouts
    accumulate the drift every step.
    """

    in_channels: int = 1
    hidden_channels: int = 32
    depth: int = 4
    kernel_size: int = 3
    padding_mode: str = "periodic"
    predict_delta: bool = True
    zero_mean_delta: bool = False

    def __post_init__(self) -> None:
        if self.kernel_size % 2 != 1:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.depth < 1:
            raise ValueError("depth must be at least 1")
        if self.in_channels < 1 or self.hidden_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.padding_mode not in ("periodic", "zero"):
            raise ValueError(f"unknown padding_mode {self.padding_mode!r}")

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """Deterministic (name, shape) list; conv<depth> is the output layer."""
        k = self.kernel_size
        shapes: list[tuple[str, tuple[int, ...]]] = []
        c_in = self.in_channels
        for layer in range(self.depth):
            shapes.append((f"conv{layer}.weight", (self.hidden_channels, c_in, k, k)))
            shapes.append((f"conv{layer}.bias", (self.hidden_channels,)))
            c_in = self.hidden_channels
        shapes.append((f"conv{self.depth}.weight", (1, c_in, k, k)))
        shapes.append((f"conv{self.depth}.bias", (1,)))
        return shapes


@dataclass(frozen=True)
class AuxChannelSpec:
    mode: str = AUX_NONE
    pe_frequencies: int = 4

    def __post_init__(self) -> None:
        if self.mode not in _AUX_MODES:
            raise ValueError(f"unknown aux mode {self.mode!r}")
        if self.pe_frequencies < 1:
            raise ValueError("pe_frequencies must be positive")

    @property
    def channel_count(self) -> int:
        if self.mode == AUX_NONE:
            return 0
        if self.mode == AUX_NORMALIZED_COORDS:
            return 2
        if self.mode == AUX_SINUSOIDAL_PE:
            return 4 * self.pe_frequencies
        return 1


class ModelParams:
    """Named parameter tensors matching a ModelSpec; the single source of
    truth shared by every subtask."""

    def __init__(self, spec: ModelSpec, tensors: dict[str, ad.Tensor]):
        expected = spec.layer_shapes()
        if [name for name, _ in expected] != list(tensors):
            raise ValueError(
                f"parameter names {list(tensors)} do not match spec layers "
                f"{[name for name, _ in expected]}"
            )
        for name, shape in expected:
            got = tensors[name].shape
            if got != shape:
                raise ValueError(f"{name}: shape {got} does not match spec shape {shape}")
        self.spec = spec
        self.tensors = dict(tensors)

    def items(self):
        return self.tensors.items()

    def values_snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.tensors.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, t in self.tensors.items():
            arr = np.asarray(values[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"{name}: shape {arr.shape} does not match {t.shape}")
            t.data[...] = arr


def init_params(spec: ModelSpec, seed: int | np.random.SeedSequence) -> ModelParams:
    """Kaiming-uniform hidden layers, zero biases, zero output layer
    (identity map at initialization when predict_delta is on)."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, ad.Tensor] = {}
    final = f"conv{spec.depth}.weight"
    for name, shape in spec.layer_shapes():
        if name.endswith(".bias") or name == final:
            data = np.zeros(shape)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            bound = np.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        tensors[name] = ad.tensor(data, requires_grad=True)
    return ModelParams(spec, tensors)


def forward(params: ModelParams, x: ad.Tensor) -> ad.Tensor:
    """[in_channels, h, w] -> [1, h, w]; the state is channel 0."""
    spec = params.spec
    if x.shape[0] != spec.in_channels:
        raise ValueError(f"input has {x.shape[0]} channels, spec expects {spec.in_channels}")
    h = x
    for layer in range(spec.depth):
        h = ad.gelu(_conv_bias(params, h, layer))
    y = _conv_bias(params, h, spec.depth)
    if spec.zero_mean_delta:
        y = ad.subtract(y, ad.reduce_mean(y))
    if spec.predict_delta:
        y = ad.add(y, ad.crop(x, (slice(0, 1), slice(None), slice(None))))
    return y


def _conv_bias(params: ModelParams, h: ad.Tensor, layer: int) -> ad.Tensor:
    w = params.tensors[f"conv{layer}.weight"]
    b = params.tensors[f"conv{layer}.bias"]
    out = ad.conv2d(h, w, params.spec.padding_mode)
    return ad.add(out, ad.reshape(b, (b.shape[0], 1, 1)))


# --------------------------------------------------------- input features


def subgrid_coordinates(
    grid: GridSpec, i: int, j: int, factors: StaggerFactors
) -> tuple[np.ndarray, np.ndarray]:
    """Fine-grid normalized coordinates of subgrid (i, j)'s points, as two
    coarse-shaped channels: rows (r*s_h+i)/H, columns (c*s_w+j)/W."""
    rows = (np.arange(grid.height // factors.s_h) * factors.s_h + i) / grid.height
    cols = (np.arange(grid.width // factors.s_w) * factors.s_w + j) / grid.width
    shape = (rows.size, cols.size)
    return (
        np.broadcast_to(rows[:, None], shape).copy(),
        np.broadcast_to(cols[None, :], shape).copy(),
    )


def positional_channels(
    grid: GridSpec, i: int, j: int, factors: StaggerFactors, aux: AuxChannelSpec
) -> list[np.ndarray]:
    rn, cn = subgrid_coordinates(grid, i, j, factors)
    if aux.mode == AUX_NORMALIZED_COORDS:
        return [rn, cn]
    if aux.mode == AUX_SINUSOIDAL_PE:
        channels = []
        for f in range(aux.pe_frequencies):
            freq = 2.0**f
            channels.extend(
                [
                    np.sin(2 * np.pi * freq * rn),
                    np.cos(2 * np.pi * freq * rn),
                    np.sin(2 * np.pi * freq * cn),
                    np.cos(2 * np.pi * freq * cn),
                ]
            )
        return channels
    raise ValueError(f"no positional channels for aux mode {aux.mode!r}")


def stream_velocity(psi, dx: float, dy: float | None = None):
    """(vx, vy) = (psi_y, -psi_x), central differences with periodic wrap."""
    dy = dx if dy is None else dy
    vx = (_shift(psi, -1, 0) - _shift(psi, 1, 0)) * (1.0 / (2.0 * dy))
    vy = (_shift(psi, -1, 1) - _shift(psi, 1, 1)) * (-1.0 / (2.0 * dx))
    return vx, vy


@lru_cache(maxsize=64)
def _edge_masks(shape: tuple[int, int], axis: int) -> tuple[np.ndarray, ...]:
    """(interior, low-edge, high-edge) masks along one axis, full extent in
    the other; corners belong to both axes' edge masks."""
    lo = np.zeros(shape)
    hi = np.zeros(shape)
    if axis == 0:
        lo[0, :] = 1.0
        hi[-1, :] = 1.0
    else:
        lo[:, 0] = 1.0
        hi[:, -1] = 1.0
    center = 1.0 - lo - hi
    for m in (center, lo, hi):
        m.setflags(write=False)
    return center, lo, hi


def discrete_curl(vx, vy, dx: float | None = None, dy: float | None = None):
    """curl = dvy/dx - dvx/dy; central differences, one-sided at walls.

    Fields take spacing and boundary from their grid; arrays and tensors
    use the given spacing with periodic wrap.
    """
    as_field = isinstance(vx, Field)
    if as_field:
        if vx.grid != vy.grid:
            raise ValueError("velocity components live on different grids")
        grid = vx.grid
        dx, dy = grid.dx, grid.row_spacing
        a, b = vx.values, vy.values
        periodic = grid.periodic
    else:
        if dx is None:
            raise ValueError("dx is required for non-Field inputs")
        dy = dx if dy is None else dy
        a, b = vx, vy
        periodic = True
    shape = a.shape if not isinstance(a, ad.Tensor) else a.data.shape
    if shape != (b.shape if not isinstance(b, ad.Tensor) else b.data.shape):
        raise ValueError("velocity components have different shapes")
    if periodic:
        dvy_dx = (_shift(b, -1, 1) - _shift(b, 1, 1)) * (1.0 / (2.0 * dx))
        dvx_dy = (_shift(a, -1, 0) - _shift(a, 1, 0)) * (1.0 / (2.0 * dy))
        curl = dvy_dx - dvx_dy
    else:
        # separable masks: central in the interior of each axis, one-sided
        # at that axis's two edges (full rows/columns, corners included)
        wrap = _wrapper(a)
        col_c, col_lo, col_hi = _edge_masks(shape, axis=1)
        row_c, row_lo, row_hi = _edge_masks(shape, axis=0)
        dvy_dx = (
            wrap(col_c) * ((_shift(b, -1, 1) - _shift(b, 1, 1)) * (1.0 / (2.0 * dx)))
            + wrap(col_lo) * ((_shift(b, -1, 1) - b) * (1.0 / dx))
            + wrap(col_hi) * ((b - _shift(b, 1, 1)) * (1.0 / dx))
        )
        dvx_dy = (
            wrap(row_c) * ((_shift(a, -1, 0) - _shift(a, 1, 0)) * (1.0 / (2.0 * dy)))
            + wrap(row_lo) * ((_shift(a, -1, 0) - a) * (1.0 / dy))
            + wrap(row_hi) * ((a - _shift(a, 1, 0)) * (1.0 / dy))
        )
        curl = dvy_dx - dvx_dy
    if as_field:
        data = curl.data if isinstance(curl, ad.Tensor) else curl
        return Field(vx.grid, data, time=vx.time)
    return curl


# --------------------------------------------------------- subtask adapter


@lru_cache(maxsize=128)
def _subgrid_interior_mask(grid: GridSpec, factors: StaggerFactors, i: int, j: int) -> np.ndarray:
    fine = np.zeros(grid.shape)
    fine[1:-1, 1:-1] = 1.0
    sub = fine[i :: factors.s_h, j :: factors.s_w].copy()
    sub.setflags(write=False)
    return sub


def make_model_fn(params: ModelParams, aux: AuxChannelSpec = AuxChannelSpec()):
    """Adapter from one subgrid state to the next, for staggered losses and
    rollouts: assembles [state + aux channels], runs the shared net, and on
    wall grids pins the wall points of the output to zero (the masking sits
    here so standalone coarse rollouts and ensemble components share it
    bit-for-bit)."""

    def model_fn(sub_in: ad.Tensor, ctx: SubtaskContext) -> ad.Tensor:
        channels = [ad.reshape(sub_in, (1,) + sub_in.shape)]
        if aux.mode in (AUX_NORMALIZED_COORDS, AUX_SINUSOIDAL_PE):
            for ch in positional_channels(ctx.grid, ctx.i, ctx.j, ctx.factors, aux):
                channels.append(ad.constant(ch[None, :, :]))
        elif aux.mode == AUX_VORTICITY:
            if not ctx.grid.periodic:
                raise ValueError("stream-derived vorticity channels need a periodic grid")
            dx = ctx.grid.dx * ctx.factors.s_w
            dy = ctx.grid.row_spacing * ctx.factors.s_h
            vx, vy = stream_velocity(sub_in, dx=dx, dy=dy)
            channels.append(ad.reshape(discrete_curl(vx, vy, dx=dx, dy=dy), (1,) + sub_in.shape))
        x = channels[0] if len(channels) == 1 else ad.concat_channels(channels)
        y = ad.reshape(forward(params, x), sub_in.shape)
        if not ctx.grid.periodic:
            mask = _subgrid_interior_mask(ctx.grid, ctx.factors, ctx.i, ctx.j)
            y = ad.multiply(y, ad.constant(mask))
        return y

    return model_fn


def ensemble_forward(
    model_fn,
    tasks,
    factors: StaggerFactors | None = None,
    workers: int = 1,
) -> list[ad.Tensor]:
    """Run all (ctx, input) subtasks; results gathered in task order, so the
    output is bit-identical however many workers execute it. When factors are
    given, the task set must cover every (i, j, k) subtask exactly once."""
    tasks = list(tasks)
    if factors is not None:
        seen = [(ctx.i, ctx.j, ctx.k) for ctx, _ in tasks]
        wanted = sorted(factors.subtasks())
        if sorted(seen) != wanted:
            missing = sorted(set(wanted) - set(seen))
            raise ValueError(f"subtask inputs do not cover the layout; missing {missing}")
    if workers <= 1 or len(tasks) <= 1:
        return [model_fn(x, ctx) for ctx, x in tasks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(model_fn, x, ctx) for ctx, x in tasks]
        return [f.result() for f in futures]


# --------------------------------------------------------- checkpoints

_SPEC_FILE = "model.txt"


def save_params(params: ModelParams, directory: str | Path) -> None:
    directory = Path(directory)
    snapshots.save_named_arrays(directory, [(n, t.data) for n, t in params.items()])
    spec = params.spec
    lines = [
        f"in_channels {spec.in_channels}",
        f"hidden_channels {spec.hidden_channels}",
        f"depth {spec.depth}",
        f"kernel_size {spec.kernel_size}",
        f"padding_mode {spec.padding_mode}",
        f"predict_delta {int(spec.predict_delta)}",
        f"zero_mean_delta {int(spec.zero_mean_delta)}",
    ]
    (directory / _SPEC_FILE).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_params(directory: str | Path) -> ModelParams:
    directory = Path(directory)
    raw = dict(
        line.split(" ", 1)
        for line in (directory / _SPEC_FILE).read_text(encoding="utf-8").splitlines()
        if line.strip()
    )
    spec = ModelSpec(
        in_channels=int(raw["in_channels"]),
        hidden_channels=int(raw["hidden_channels"]),
        depth=int(raw["depth"]),
        kernel_size=int(raw["kernel_size"]),
        padding_mode=raw["padding_mode"],
        predict_delta=bool(int(raw["predict_delta"])),
        zero_mean_delta=bool(int(raw.get("zero_mean_delta", "0"))),
    )
    tensors = {
        name: ad.tensor(arr, requires_grad=True) for name, arr in snapshots.load_named_arrays(directory)
    }
    return ModelParams(spec, tensors)
