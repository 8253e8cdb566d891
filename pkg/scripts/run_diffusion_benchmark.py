#!/usr/bin/env python3
"""Train the 16x16 diffusion benchmark undecomposed and staggered, then
report Error-k for both against the reference solver.

Writes out/<name>/ for each config and prints one summary line per run.
Roughly 5 CPU-minutes total.
"""

import argparse
import csv
import sys
from pathlib import Path

from stagsolve import cli

CONFIGS = ("configs/diffusion16.toml", "configs/diffusion16_stagger.toml")


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
    parser.add_argument("--out", default="out/diffusion_benchmark")
    args = parser.parse_args()
    root = Path(args.out)
    for config in CONFIGS:
        name = Path(config).stem
        errors = run(config, root / name)
        horizon = max(errors)
        print(f"{name}: Error-{horizon} = {errors[horizon]:.3%}  "
              f"(checkpoints: {', '.join(f'E{k}={v:.3%}' for k, v in sorted(errors.items()))})")


if __name__ == "__main__":
    main()
