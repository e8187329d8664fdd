#!/usr/bin/env python3
"""Finite-difference audit of the whole model's gradients (CLI wrapper)."""

import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from clinfuse.cli import run  # noqa: E402

if __name__ == "__main__":
    sys.exit(run(["gradcheck"]))
