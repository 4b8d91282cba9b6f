#!/usr/bin/env python3
"""Reproduce the six-pattern sparsity table at n=128, with and without the
diagonal, and render each mask as a PGM image.

Usage:
    python scripts/baseline_sparsity_table.py [--n 128] [--out-dir baselines]
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from sparseattn.cli import main  # noqa: E402

if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument("--n", type=int, default=128)
    parser.add_argument("--out-dir", default="baselines")
    args = parser.parse_args()
    raise SystemExit(main([
        "sweep-baselines", "--n", str(args.n), "--out-dir", args.out_dir, "--pgm",
    ]))
