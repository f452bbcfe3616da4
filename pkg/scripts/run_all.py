"""Run every experiment with the shipped configs, then the selftest.

Usage: python scripts/run_all.py [--seed N] [--out DIR]
"""

import argparse
import sys
import time
from pathlib import Path

from foresee.bench import cli

ROOT = Path(__file__).resolve().parent.parent
JOBS = [
    ("predict-benchmark", "predict.toml"),
    ("gamma-benchmark", "gamma.toml"),
    ("unicycle-trajopt", "unicycle.toml"),
    ("leader-follower", "leader_follower.toml"),
    ("selftest", "selftest.toml"),
]


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=ROOT / "out")
    args = p.parse_args()
    worst = 0
    for cmd, cfg in JOBS:
        t = time.perf_counter()
        code = cli.main([cmd, "--config", str(ROOT / "configs" / cfg), "--seed", str(args.seed),
                         "--out", str(args.out / cmd), "-v"])
        print(f"{cmd}: exit {code} in {time.perf_counter() - t:.1f}s", flush=True)
        worst = max(worst, code)
    return worst


if __name__ == "__main__":
    sys.exit(main())
