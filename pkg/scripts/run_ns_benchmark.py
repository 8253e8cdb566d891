#!/usr/bin/env python3
"""Train the periodic 32x32 Navier-Stokes benchmark undecomposed and
staggered, then report Error-k for both against the reference solver.

Roughly 40 CPU-minutes total at the default configs.
"""

import argparse
import csv
import sys
from pathlib import Path

from stagsolve import cli

CONFIGS = ("configs/ns32.toml", "configs/ns32_stagger.toml")


def run(config: str, out: Path) -> dict[int, float]:
    base = ["--config", config, "--out", str(out), "--workers", "1"]
    for step in ("generate", "train"):
        code = cli.main([step] + base)
        if code != 0:
            sys.exit(f"{step} failed for {config} (exit {code})")
    code = cli.main(["evaluate"] + base + ["--checkpoint", str(out / "checkpoint")])
    if code != 0:
        sys.exit(f"evaluate failed for {config} (exit {code})")
    errors = {}
    with open(out / "errors.csv", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            errors[int(row["k"])] = float(row["relative_error"])
    return errors


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="out/ns_benchmark")
    args = parser.parse_args()
    root = Path(args.out)
    results = {}
    for config in CONFIGS:
        name = Path(config).stem
        errors = run(config, root / name)
        horizon = max(errors)
        results[name] = errors[horizon]
        print(f"{name}: Error-{horizon} = {errors[horizon]:.3%}  "
              f"(checkpoints: {', '.join(f'E{k}={v:.3%}' for k, v in sorted(errors.items()))})")
    if len(results) == 2:
        base, stag = results[Path(CONFIGS[0]).stem], results[Path(CONFIGS[1]).stem]
        print(f"staggered/undecomposed error ratio: {stag / base:.2f}x")


if __name__ == "__main__":
    main()
