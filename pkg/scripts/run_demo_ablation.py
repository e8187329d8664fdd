#!/usr/bin/env python3
"""Run the bundled three-variant comparison and print the table.

Equivalent to `clinfuse ablate --config configs/demo.cfg --seed 7 --out
out/demo`, kept as a script so the experiment is one command from a fresh
checkout. Takes about 2-3 minutes on one CPU core; pass --jobs to parallelize
fold training.
"""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from clinfuse.cli import run  # noqa: E402


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--out", default="out/demo")
    parser.add_argument("--jobs", type=int, default=1)
    args = parser.parse_args()

    config = os.path.join(os.path.dirname(__file__), "..", "configs",
                          "demo.cfg")
    return run(["ablate", "--config", config, "--seed", str(args.seed),
                "--out", args.out, "--jobs", str(args.jobs)])


if __name__ == "__main__":
    sys.exit(main())
