#!/usr/bin/env python3
"""Run the three structure studies (transfer-matrix bandwidth, block
rank gap, MAC accounting) and print their CSV artifacts.

A few seconds end to end.
"""

import argparse
import sys
from pathlib import Path

from stagsolve import cli


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default="configs/analysis16.toml")
    parser.add_argument("--out", default="out/analysis")
    args = parser.parse_args()
    out = Path(args.out)
    for kind in ("bandwidth", "prop1", "gmacs"):
        code = cli.main(["analyze", kind, "--config", args.config,
                         "--out", str(out / kind), "--workers", "1"])
        if code != 0:
            sys.exit(f"analyze {kind} failed (exit {code})")
        for csv_path in sorted((out / kind).glob("*.csv")):
            print(f"--- {csv_path}")
            print(csv_path.read_text(encoding="utf-8").rstrip())


if __name__ == "__main__":
    main()
