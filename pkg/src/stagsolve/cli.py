"""Command line front end: every experiment artifact comes from here.

Subcommands cover the full pipeline: generate (datasets plus reference
trajectories with a residual audit), train, evaluate (Error-k tables),
rollout (saved trajectories), analyze (bandwidth / least-squares /
cost-accounting studies) and control (input recovery through the frozen
model). Each run validates its config completely before touching the
output directory, then stamps the directory with the resolved config
and a provenance digest. Nothing written here embeds timestamps or
absolute paths, so a one-worker rerun of the same config reproduces the
same bytes (measured wall-clock columns in training history excepted).
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import analysis, models, oracles, training
from . import autodiff as ad
from . import residuals as res
from .config import (
    ConfigError,
    ExperimentConfig,
    load_config,
    resolved_toml,
    run_digest,
)
from .fields import Field, FieldSequence, StaggerFactors
from .snapshots import save_field, save_sequence

AUDIT_TOL = 1e-6

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_TRAINING = 4
EXIT_IO = 5


# --------------------------------------------------------------- shared


def _pad_steps(n: int, s_t: int) -> int:
    return ((n + s_t - 1) // s_t) * s_t


def _initial_state(cfg: ExperimentConfig, index: int) -> Field:
    """Pool entry `index`'s oracle starting state.

    Lid-driven runs always start from rest (the burn-in produces the
    actual data distribution), so [data] only shapes periodic runs.
    """
    if cfg.oracle.equation == oracles.NS_LID_DRIVEN:
        return Field(cfg.grid, np.zeros(cfg.grid.shape))
    return Field(cfg.grid, cfg.initial_values(index))


def _entry(cfg: ExperimentConfig, index: int) -> FieldSequence:
    return oracles.prepare_bootstrap(_initial_state(cfg, index), cfg.factors.s_t, cfg.oracle)


def _seed_trajectory(cfg: ExperimentConfig, index: int, horizon: int) -> FieldSequence:
    """Oracle run for seed `index`, frames 0..horizon past any burn-in."""
    state0 = _initial_state(cfg, index)
    if cfg.oracle.equation != oracles.NS_LID_DRIVEN:
        return oracles.solve(state0, horizon, cfg.oracle)
    burn_steps = round(cfg.oracle.burn_in_time / cfg.oracle.dt)
    full = oracles.solve_ns(state0, burn_steps + horizon, cfg.oracle)
    return FieldSequence(frames=full.frames[burn_steps:], dt=cfg.oracle.dt)


def build_pool(cfg: ExperimentConfig) -> training.TrainingPool:
    s_t = cfg.factors.s_t
    if cfg.data_windows == "bootstrap":
        entries = [_entry(cfg, i) for i in range(cfg.pool_count)]
    else:
        entries = []
        for i in range(cfg.pool_count):
            traj = _seed_trajectory(cfg, i, cfg.data_horizon)
            entries.extend(training.trajectory_windows(traj, s_t, cfg.data_stride))
    return training.TrainingPool(entries, s_t)


def truth_trajectory(cfg: ExperimentConfig, horizon: int) -> FieldSequence:
    """Reference frames 0..horizon aligned with entry 0's bootstrap.

    Uses the same stepping as prepare_bootstrap, so the first s_t frames
    match the bootstrap bit for bit.
    """
    return _seed_trajectory(cfg, 0, horizon)


def _write_provenance(out: Path, cfg: ExperimentConfig, workers: int) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.toml").write_text(resolved_toml(cfg), encoding="utf-8")
    (out / "digest.txt").write_text(run_digest(cfg, workers), encoding="utf-8")


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(header))
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


# ------------------------------------------------------------- commands


def cmd_generate(cfg: ExperimentConfig, out: Path, workers: int, args: Any) -> int:
    entries = [_entry(cfg, i) for i in range(cfg.pool_count)]
    horizon = _pad_steps(cfg.eval_horizon, cfg.factors.s_t)
    truth = truth_trajectory(cfg, horizon)

    residual_fn = training.residual_fn_for(cfg.oracle, cfg.grid)

    def max_pair_residual(seq: FieldSequence) -> float:
        worst = 0.0
        for a, b in zip(seq.frames, seq.frames[1:]):
            r = residual_fn(ad.constant(a.values), ad.constant(b.values))
            worst = max(worst, float(np.max(np.abs(r.data))))
        return worst

    audit = max(max_pair_residual(truth), max(map(max_pair_residual, entries)))
    if audit > AUDIT_TOL:
        raise oracles.SolverError(
            f"generated pairs fail the residual audit: {audit:.3e} > {AUDIT_TOL:.0e}"
        )

    _write_provenance(out, cfg, workers)
    lines = [
        f"entries {len(entries)}",
        f"s_t {cfg.factors.s_t}",
        f"equation {cfg.oracle.equation}",
        f"grid {cfg.grid.height}x{cfg.grid.width}",
        f"truth_frames {len(truth)}",
    ]
    for i, entry in enumerate(entries):
        save_sequence(out / "dataset" / f"entry_{i:04d}", entry)
        lines.append(f"entry_{i:04d} t0 {entry.frames[0].time!r} frames {len(entry)}")
    save_sequence(out / "truth", truth)
    lines.append(f"audit max_pair_residual {audit!r} tolerance {AUDIT_TOL!r} pass")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"generate: {len(entries)} entries, {len(truth)} truth frames, audit {audit:.3e}")
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, out: Path, workers: int, args: Any) -> int:
    pool = build_pool(cfg)
    result = training.train(pool, cfg.train_config(workers))
    _write_provenance(out, cfg, workers)
    models.save_params(result.params, out / "checkpoint")
    training.write_history_csv(out / "history.csv", result.history)
    summary = [
        f"iterations {len(result.history)}",
        f"best_iteration {result.best_iteration}",
        f"best_loss {result.best_loss!r}",
        f"final_pool_size {len(pool)}",
    ]
    (out / "train_summary.txt").write_text("\n".join(summary) + "\n", encoding="utf-8")
    print(
        f"train: {len(result.history)} iterations, best loss {result.best_loss:.6e} "
        f"at iteration {result.best_iteration}"
    )
    return EXIT_OK


def cmd_evaluate(cfg: ExperimentConfig, out: Path, workers: int, args: Any) -> int:
    params = models.load_params(args.checkpoint)
    init = _entry(cfg, 0)
    horizon = _pad_steps(cfg.eval_horizon, cfg.factors.s_t)
    pred = training.rollout(params, init, horizon, cfg.factors, cfg.aux, workers)
    truth = truth_trajectory(cfg, horizon)
    rows = []
    for k in cfg.eval_checkpoints:
        err = analysis.error_k(pred, truth, k)
        rows.append((k, truth.frames[k].time, err))
    _write_provenance(out, cfg, workers)
    _write_csv(out / "errors.csv", ("k", "time", "relative_error"), rows)
    snaps = out / "snapshots"
    snaps.mkdir(parents=True, exist_ok=True)
    for k in cfg.eval_checkpoints:
        save_field(snaps / f"pred_{k:04d}.nstg", pred.frames[k])
        save_field(snaps / f"truth_{k:04d}.nstg", truth.frames[k])
    worst = max(err for _, _, err in rows)
    print(f"evaluate: {len(rows)} checkpoints, worst relative error {worst:.6e}")
    return EXIT_OK


def cmd_rollout(cfg: ExperimentConfig, out: Path, workers: int, args: Any) -> int:
    params = models.load_params(args.checkpoint)
    init = _entry(cfg, 0)
    horizon = _pad_steps(cfg.eval_horizon, cfg.factors.s_t)
    pred = training.rollout(params, init, horizon, cfg.factors, cfg.aux, workers)
    _write_provenance(out, cfg, workers)
    save_sequence(out / "trajectory", pred)
    print(f"rollout: {len(pred)} frames to t={pred.frames[-1].time!r}")
    return EXIT_OK


def _analyze_bandwidth(cfg: ExperimentConfig, out: Path) -> str:
    an = cfg.analysis
    boundary = res.PERIODIC if cfg.grid.periodic else res.DIRICHLET
    t2 = analysis.build_transfer_matrix(
        cfg.grid,
        res.DiffusionResidualConfig(dt=an["dt"], dx=an["dx"], scheme=res.EXPLICIT, boundary=boundary),
    )
    t1 = analysis.build_transfer_matrix(
        an["d1"],
        res.DiffusionResidualConfig(
            dt=an["dt1"], dx=an["dx"], scheme=res.EXPLICIT, boundary=res.DIRICHLET
        ),
    )
    studies = (("grid2d", analysis.transfer_power_bandwidth(t2, an["k_max"])),
               ("line1d", analysis.transfer_power_bandwidth(t1, an["k_max"])))
    rows = [(name, k, bw) for name, study in studies for k, bw in zip(study.ks, study.bandwidths)]
    _write_csv(out / "bandwidth.csv", ("study", "k", "bandwidth"), rows)
    fits = []
    for name, study in studies:
        fits.append(
            (
                name,
                study.bandwidths[0],
                -1 if study.k_dense is None else study.k_dense,
                study.fit_window[0],
                study.fit_window[1],
                study.fit_slope,
                study.fit_intercept,
                study.fit_r_squared,
                max(study.bandwidths),
            )
        )
    _write_csv(
        out / "bandwidth_fits.csv",
        ("study", "b1", "k_dense", "fit_lo", "fit_hi", "slope", "intercept", "r_squared", "max_bandwidth"),
        fits,
    )
    return f"k_dense grid2d={fits[0][2]} line1d={fits[1][2]}"


def _analyze_prop1(cfg: ExperimentConfig, out: Path) -> str:
    an = cfg.analysis
    n, d, blocks, seed = an["prop1_n"], an["prop1_d"], an["prop1_blocks"], an["prop1_seed"]
    cases = (
        ("equal", *analysis.prop1_equal_case(n, d, blocks, seed)),
        ("generic", *analysis.prop1_generic_case(n, d, blocks, seed)),
    )
    rows = []
    for name, samples, targets in cases:
        report = analysis.prop1_verify(samples, targets, blocks)
        rows.append(
            (
                name,
                report.n_samples,
                report.d,
                report.blocks,
                report.rank_full,
                min(report.block_ranks),
                max(report.block_ranks),
                max(report.gaps),
                report.verdict,
            )
        )
    _write_csv(
        out / "prop1.csv",
        ("case", "n_samples", "d", "blocks", "rank_full", "min_block_rank", "max_block_rank", "max_gap", "verdict"),
        rows,
    )
    return f"verdicts {rows[0][-1]}/{rows[1][-1]}"


def _analyze_gmacs(cfg: ExperimentConfig, out: Path) -> str:
    horizon = _pad_steps(cfg.eval_horizon, cfg.factors.s_t)
    configs = (
        ("staggered", cfg.factors),
        ("undecomposed", StaggerFactors(1, 1, 1)),
    )
    rows = []
    for label, factors in configs:
        r = analysis.count_gmacs(cfg.model, cfg.grid, factors, horizon)
        rows.append(
            (
                label, factors.s_h, factors.s_w, factors.s_t,
                r.per_subtask_macs, r.subtask_count, r.total_step_macs,
                r.per_card_step_macs, r.ensemble_steps,
                r.horizon_total_macs, r.horizon_per_card_macs, r.fold_vs_baseline,
            )
        )
    _write_csv(
        out / "gmacs.csv",
        (
            "label", "s_h", "s_w", "s_t", "per_subtask_macs", "subtask_count",
            "total_step_macs", "per_card_step_macs", "ensemble_steps",
            "horizon_total_macs", "horizon_per_card_macs", "fold_vs_baseline",
        ),
        rows,
    )
    return f"fold {rows[0][-1]}x over {rows[0][8]} ensemble steps"


def cmd_analyze(cfg: ExperimentConfig, out: Path, workers: int, args: Any) -> int:
    runner = {
        "bandwidth": _analyze_bandwidth,
        "prop1": _analyze_prop1,
        "gmacs": _analyze_gmacs,
    }[args.kind]
    _write_provenance(out, cfg, workers)
    note = runner(cfg, out)
    print(f"analyze {args.kind}: {note}")
    return EXIT_OK


def cmd_control(cfg: ExperimentConfig, out: Path, workers: int, args: Any) -> int:
    if cfg.factors.s_t != 1:
        raise ConfigError("input recovery differentiates a single-frame rollout; set factors.s_t = 1")
    params = models.load_params(args.checkpoint)
    model_fn = models.make_model_fn(params, cfg.aux)
    init = _entry(cfg, 0)
    target = init.frames[0]
    horizon = cfg.control_horizon
    observed = training.rollout(params, init, horizon, cfg.factors, cfg.aux, workers)
    observed_end = ad.constant(observed.frames[-1].values)

    def objective(x: ad.Tensor) -> ad.Tensor:
        frames = training.rollout_tensor(
            model_fn, x, target.time, horizon, cfg.grid, cfg.factors, cfg.oracle.dt
        )
        return ad.reduce_mean(ad.square(ad.subtract(frames[-1], observed_end)))

    best, trace = training.optimize_input(
        objective, np.zeros(cfg.grid.shape), cfg.control_steps, cfg.control_lr
    )
    _write_provenance(out, cfg, workers)
    _write_csv(out / "control_trace.csv", ("step", "objective"), list(enumerate(trace)))
    save_field(out / "recovered.nstg", Field(cfg.grid, best, time=target.time))
    save_field(out / "target.nstg", target)
    summary = [
        f"steps {cfg.control_steps}",
        f"initial_objective {trace[0]!r}",
        f"final_objective {trace[-1]!r}",
        f"reduction {trace[-1] / trace[0]!r}" if trace[0] else "reduction 0.0",
    ]
    (out / "control_summary.txt").write_text("\n".join(summary) + "\n", encoding="utf-8")
    print(f"control: objective {trace[0]:.6e} -> {trace[-1]:.6e} in {cfg.control_steps} steps")
    return EXIT_OK


# --------------------------------------------------------------- driver


_DISPATCH = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "rollout": cmd_rollout,
    "analyze": cmd_analyze,
    "control": cmd_control,
}


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment TOML")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--workers", type=int, default=None, help="parallel workers (default: all cores)")
    common.add_argument("--seed", type=int, default=None, help="override experiment.seed")

    parser = argparse.ArgumentParser(prog="stagsolve", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="sample datasets and reference trajectories")
    sub.add_parser("train", parents=[common], help="train the coarse solver")
    for name in ("evaluate", "rollout", "control"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--checkpoint", required=True, help="trained parameter directory")
    p = sub.add_parser("analyze", parents=[common], help="structure and cost studies")
    p.add_argument("kind", choices=("bandwidth", "prop1", "gmacs"))
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        workers = args.workers if args.workers is not None else (os.cpu_count() or 1)
        if workers < 1:
            raise ConfigError("--workers must be at least 1")
        return _DISPATCH[args.command](cfg, Path(args.out), workers, args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        # mismatched checkpoint/config combinations surface here
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except oracles.SolverError as exc:
        print(f"error: solver: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except training.TrainingError as exc:
        print(f"error: training: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
