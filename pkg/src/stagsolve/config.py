"""Experiment configuration: strict TOML in, resolved TOML back out.

A config file describes one experiment end to end (equation, grid,
decomposition, model, training, data, evaluation). Parsing is strict:
unknown sections or keys are errors, not warnings, so a typo cannot
silently fall back to a default. Loading eagerly builds every typed
object the run will need, which means a malformed config fails before
any command touches the output directory.

The resolved config (defaults filled in, overrides applied) can be
re-emitted as TOML deterministically, so run artifacts are
self-describing and byte-stable across reruns.
"""

from __future__ import annotations

import platform
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib as _toml
except ModuleNotFoundError:  # python < 3.11
    import tomli as _toml

import numpy as np

from . import __version__
from . import oracles
from . import residuals as res
from .fields import DIRICHLET_LID, PERIODIC, GridSpec, StaggerFactors
from .models import AuxChannelSpec, ModelSpec
from .training import PoolConfig, TrainConfig


class ConfigError(ValueError):
    """A config file that must not produce any run output."""


# Each entry: (type tag, default). Required keys carry the REQUIRED
# sentinel instead of a default. Type tags: int/float/bool/str plus
# int_list for arrays of integers.
REQUIRED = object()

_SCHEMA: dict[str, dict[str, tuple[str, Any]]] = {
    "experiment": {
        "name": ("str", "run"),
        "seed": ("int", 0),
    },
    "equation": {
        "kind": ("str", REQUIRED),
        "dt": ("float", REQUIRED),
        "reynolds": ("float", 0.0),
        "scheme": ("str", res.CRANK_NICOLSON),
        "forcing": ("str", "none"),
        "lid_speed": ("float", 1.0),
        "burn_in_time": ("float", 1.98),
        "picard_tol": ("float", 1e-10),
        "picard_max_iters": ("int", 50),
        "poisson_tol": ("float", 1e-10),
        "linear_tol": ("float", 1e-13),
    },
    "grid": {
        "height": ("int", REQUIRED),
        "width": ("int", REQUIRED),
        "dx": ("float", REQUIRED),
        "boundary": ("str", PERIODIC),
    },
    "factors": {
        "s_h": ("int", 1),
        "s_w": ("int", 1),
        "s_t": ("int", 1),
    },
    "model": {
        "hidden_channels": ("int", 32),
        "depth": ("int", 4),
        "kernel_size": ("int", 3),
        "padding_mode": ("str", "periodic"),
        "predict_delta": ("bool", True),
        "zero_mean_delta": ("bool", False),
    },
    "aux": {
        "mode": ("str", "none"),
        "pe_frequencies": ("int", 4),
    },
    "train": {
        "lr0": ("float", 3e-3),
        "lr_decay": ("float", 0.9),
        "decay_every": ("int", 5000),
        "batch_size": ("int", 4),
        "iterations": ("int", 1000),
        "grad_clip": ("float", 1.0),
        "divergence_threshold": ("float", 1e6),
    },
    "pool": {
        "count": ("int", 4),
        "evolving": ("bool", False),
        "enrich_threshold": ("float", 1e-4),
        "window": ("int", 200),
        "correct": ("bool", False),
        "max_size": ("int", 0),
    },
    "data": {
        "kind": ("str", "grf"),
        "amplitude": ("float", 8.0**3),
        "shift": ("float", 64.0),
        "exponent": ("float", 4.0),
        "scale": ("float", 1.0),
        "windows": ("str", "bootstrap"),
        "horizon": ("int", 0),
        "stride": ("int", 1),
    },
    "eval": {
        "horizon": ("int", 20),
        "checkpoints": ("int_list", ()),
    },
    "analysis": {
        "k_max": ("int", 32),
        "dt": ("float", 0.2),
        "dx": ("float", 1.0),
        "d1": ("int", 32),
        "dt1": ("float", 0.4),
        "prop1_n": ("int", 200),
        "prop1_d": ("int", 16),
        "prop1_blocks": ("int", 4),
        "prop1_seed": ("int", 0),
    },
    "control": {
        "steps": ("int", 500),
        "lr": ("float", 1e-2),
        "horizon": ("int", 4),
    },
}

_EQUATION_KINDS = set(oracles.EQUATIONS)
_FORCING_KINDS = ("none", "standard")
_DATA_KINDS = ("grf", "normal")
_WINDOW_KINDS = ("bootstrap", "trajectory")

# id 3 in the run's seed tree; 0..2 belong to the trainer's streams.
DATA_ENTRY_STREAM = 3
CONTROL_STREAM = 4


def _check_value(section: str, key: str, tag: str, value: Any) -> Any:
    where = f"{section}.{key}"
    if tag == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean, got {value!r}")
        return value
    if tag == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if tag == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if tag == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
        return value
    if tag == "int_list":
        if not isinstance(value, list) or any(
            isinstance(v, bool) or not isinstance(v, int) for v in value
        ):
            raise ConfigError(f"{where} must be a list of integers, got {value!r}")
        return tuple(value)
    raise AssertionError(f"unhandled schema tag {tag}")


def _resolve_sections(raw: dict[str, Any]) -> dict[str, dict[str, Any]]:
    """Strict walk of the parsed document against the schema."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a table")
    for section in raw:
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(raw[section], dict):
            raise ConfigError(f"[{section}] must be a table")
        for key in raw[section]:
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {section}.{key}")
    resolved: dict[str, dict[str, Any]] = {}
    for section, keys in _SCHEMA.items():
        body: dict[str, Any] = {}
        given = raw.get(section, {})
        for key, (tag, default) in keys.items():
            if key in given:
                body[key] = _check_value(section, key, tag, given[key])
            elif default is REQUIRED:
                raise ConfigError(f"missing required key {section}.{key}")
            else:
                body[key] = default
        resolved[section] = body
    return resolved


@dataclass(frozen=True)
class ExperimentConfig:
    """One fully validated experiment description.

    Every typed object is built at load time; holding an instance means
    the file already passed all structural and value checks.
    """

    name: str
    seed: int
    grid: GridSpec
    oracle: oracles.OracleConfig
    factors: StaggerFactors
    model: ModelSpec
    aux: AuxChannelSpec
    pool: PoolConfig
    pool_count: int
    data_kind: str
    data_amplitude: float
    data_shift: float
    data_exponent: float
    data_scale: float
    data_windows: str
    data_horizon: int
    data_stride: int
    eval_horizon: int
    eval_checkpoints: tuple[int, ...]
    analysis: dict[str, Any]
    control_steps: int
    control_lr: float
    control_horizon: int
    sections: dict[str, dict[str, Any]] = field(repr=False)

    def train_config(self, workers: int = 1) -> TrainConfig:
        t = self.sections["train"]
        return TrainConfig(
            factors=self.factors,
            oracle=self.oracle,
            model=self.model,
            aux=self.aux,
            lr0=t["lr0"],
            lr_decay=t["lr_decay"],
            decay_every=t["decay_every"],
            batch_size=t["batch_size"],
            iterations=t["iterations"],
            seed=self.seed,
            grad_clip=t["grad_clip"],
            divergence_threshold=t["divergence_threshold"],
            pool=self.pool,
            workers=workers,
        )

    def entry_seed(self, index: int) -> int:
        """Stable per-entry seed for initial-condition sampling."""
        state = np.random.SeedSequence([self.seed, DATA_ENTRY_STREAM, index])
        return int(state.generate_state(1)[0])

    def initial_values(self, index: int) -> np.ndarray:
        """Initial condition for pool entry `index` under [data]."""
        if self.data_kind == "grf":
            spec = oracles.RandomFieldSpec(
                grid=self.grid,
                seed=self.entry_seed(index),
                amplitude=self.data_amplitude,
                shift=self.data_shift,
                exponent=self.data_exponent,
            )
            return oracles.sample_random_field(spec).values * self.data_scale
        rng = np.random.default_rng(
            np.random.SeedSequence([self.seed, DATA_ENTRY_STREAM, index])
        )
        return rng.normal(size=self.grid.shape) * self.data_scale

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """The same experiment re-rooted at another seed (CLI override)."""
        sections = {k: dict(v) for k, v in self.sections.items()}
        sections["experiment"]["seed"] = seed
        return _build(sections)


def _build(sections: dict[str, dict[str, Any]]) -> ExperimentConfig:
    exp, eq, gr = sections["experiment"], sections["equation"], sections["grid"]
    fa, mo, au = sections["factors"], sections["model"], sections["aux"]
    tr, po, da = sections["train"], sections["pool"], sections["data"]
    ev, an, co = sections["eval"], sections["analysis"], sections["control"]

    if eq["kind"] not in _EQUATION_KINDS:
        raise ConfigError(
            f"equation.kind must be one of {sorted(_EQUATION_KINDS)}, got {eq['kind']!r}"
        )
    if eq["forcing"] not in _FORCING_KINDS:
        raise ConfigError(f"equation.forcing must be one of {_FORCING_KINDS}")
    if da["kind"] not in _DATA_KINDS:
        raise ConfigError(f"data.kind must be one of {_DATA_KINDS}")
    if da["windows"] not in _WINDOW_KINDS:
        raise ConfigError(f"data.windows must be one of {_WINDOW_KINDS}")
    if da["stride"] < 1:
        raise ConfigError("data.stride must be at least 1")
    if da["windows"] == "trajectory" and da["horizon"] < fa["s_t"]:
        raise ConfigError("data.horizon must be at least factors.s_t for trajectory windows")

    try:
        grid = GridSpec(
            height=gr["height"], width=gr["width"], dx=gr["dx"], boundary=gr["boundary"]
        )
        factors = StaggerFactors(s_h=fa["s_h"], s_w=fa["s_w"], s_t=fa["s_t"])
        aux = AuxChannelSpec(mode=au["mode"], pe_frequencies=au["pe_frequencies"])
        model = ModelSpec(
            in_channels=1 + aux.channel_count,
            hidden_channels=mo["hidden_channels"],
            depth=mo["depth"],
            kernel_size=mo["kernel_size"],
            padding_mode=mo["padding_mode"],
            predict_delta=mo["predict_delta"],
            zero_mean_delta=mo["zero_mean_delta"],
        )
        forcing = oracles.standard_forcing(grid) if eq["forcing"] == "standard" else None
        oracle = oracles.OracleConfig(
            equation=eq["kind"],
            dt=eq["dt"],
            dx=gr["dx"],
            reynolds=eq["reynolds"] or None,
            scheme=eq["scheme"],
            forcing=forcing,
            lid_speed=eq["lid_speed"],
            burn_in_time=eq["burn_in_time"],
            picard_tol=eq["picard_tol"],
            picard_max_iters=eq["picard_max_iters"],
            poisson_tol=eq["poisson_tol"],
            linear_tol=eq["linear_tol"],
        )
        pool = PoolConfig(
            evolving=po["evolving"],
            enrich_threshold=po["enrich_threshold"],
            window=po["window"],
            correct=po["correct"],
            max_size=po["max_size"] or None,
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    if grid.height % factors.s_h or grid.width % factors.s_w:
        raise ConfigError(
            f"factors ({factors.s_h}, {factors.s_w}) do not divide grid {grid.shape}"
        )
    if eq["kind"] == oracles.NS_PERIODIC and not grid.periodic:
        raise ConfigError("ns_periodic needs grid.boundary = 'periodic'")
    if eq["kind"] == oracles.NS_LID_DRIVEN and grid.boundary != DIRICHLET_LID:
        raise ConfigError("ns_lid_driven needs grid.boundary = 'dirichlet-lid'")
    if po["count"] < 1:
        raise ConfigError("pool.count must be at least 1")
    if ev["horizon"] < 1:
        raise ConfigError("eval.horizon must be at least 1")

    checkpoints = ev["checkpoints"] or (ev["horizon"],)
    for k in checkpoints:
        if not (1 <= k <= ev["horizon"]):
            raise ConfigError(f"eval checkpoint {k} is outside 1..{ev['horizon']}")
    sections = {s: dict(b) for s, b in sections.items()}
    sections["eval"]["checkpoints"] = list(checkpoints)

    if co["steps"] < 0 or co["horizon"] < 1 or not co["lr"] > 0:
        raise ConfigError("control needs steps >= 0, horizon >= 1 and a positive lr")
    if an["k_max"] < 1 or an["d1"] < 2 or not (an["dt"] > 0 and an["dt1"] > 0 and an["dx"] > 0):
        raise ConfigError("analysis sizes must be positive")
    if an["prop1_n"] < 1 or an["prop1_d"] < 1 or an["prop1_blocks"] < 1:
        raise ConfigError("analysis prop1 dimensions must be positive")
    if an["prop1_d"] % an["prop1_blocks"]:
        raise ConfigError("analysis.prop1_blocks must divide analysis.prop1_d")

    return ExperimentConfig(
        name=exp["name"],
        seed=exp["seed"],
        grid=grid,
        oracle=oracle,
        factors=factors,
        model=model,
        aux=aux,
        pool=pool,
        pool_count=po["count"],
        data_kind=da["kind"],
        data_amplitude=da["amplitude"],
        data_shift=da["shift"],
        data_exponent=da["exponent"],
        data_scale=da["scale"],
        data_windows=da["windows"],
        data_horizon=da["horizon"],
        data_stride=da["stride"],
        eval_horizon=ev["horizon"],
        eval_checkpoints=tuple(checkpoints),
        analysis=dict(an),
        control_steps=co["steps"],
        control_lr=co["lr"],
        control_horizon=co["horizon"],
        sections=sections,
    )


def parse_config(text: str) -> ExperimentConfig:
    try:
        raw = _toml.loads(text)
    except _toml.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc
    return _build(_resolve_sections(raw))


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"))


# ------------------------------------------------------------ emission


def _toml_scalar(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_scalar(v) for v in value) + "]"
    raise TypeError(f"cannot emit {value!r} as TOML")


def emit_toml(sections: dict[str, dict[str, Any]]) -> str:
    """Schema-ordered TOML; identical input yields identical bytes."""
    lines: list[str] = []
    for section in _SCHEMA:
        if section not in sections:
            continue
        lines.append(f"[{section}]")
        for key in _SCHEMA[section]:
            if key in sections[section]:
                lines.append(f"{key} = {_toml_scalar(sections[section][key])}")
        lines.append("")
    return "\n".join(lines)


def resolved_toml(cfg: ExperimentConfig) -> str:
    return emit_toml(cfg.sections)


def run_digest(cfg: ExperimentConfig, workers: int) -> str:
    """Provenance block for run artifacts. Deliberately timestamp-free so
    a rerun of the same configuration is byte-identical."""
    lines = [
        f"experiment {cfg.name}",
        f"seed {cfg.seed}",
        f"workers {workers}",
        f"stagsolve {__version__}",
        f"python {platform.python_version()}",
        f"numpy {np.__version__}",
    ]
    return "\n".join(lines) + "\n"
