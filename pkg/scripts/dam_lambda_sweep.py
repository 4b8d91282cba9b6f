#!/usr/bin/env python3
"""Sweep the sparsity trade-off over lambda for both mask variants.

For each lambda and seed, runs joint mask learning on the toy MLM task and
records the final binarized sparsity and held-out loss under the frozen
mask.  Larger lambda should buy sparsity at some cost in loss.

Usage:
    python scripts/dam_lambda_sweep.py [--steps 1500] [--seeds 3] \
        [--variant unstructured] [--out dam_sweep.csv]
"""

import argparse
import csv
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

import numpy as np  # noqa: E402

from sparseattn.dam import DamConfig, binarized_sparsity  # noqa: E402
from sparseattn.training import TrainConfig, train_dam  # noqa: E402

LAMBDAS = [1e-4, 1e-3, 1e-2, 1e-1]


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--steps", type=int, default=1500)
    parser.add_argument("--finetune-steps", type=int, default=500)
    parser.add_argument("--seeds", type=int, default=3)
    parser.add_argument("--variant", choices=["unstructured", "structured"],
                        default="unstructured")
    parser.add_argument("--out", default="dam_sweep.csv")
    args = parser.parse_args()

    rows = []
    for seed in range(args.seeds):
        for lam in LAMBDAS:
            cfg = TrainConfig(steps=args.steps, seed=seed)
            masks, run, state = train_dam(
                cfg, DamConfig(variant=args.variant, lam=lam),
                finetune_steps=args.finetune_steps,
            )
            rows.append({
                "variant": args.variant, "lam": lam, "seed": seed,
                "binarized_sparsity": round(binarized_sparsity(state), 4),
                "heldout_loss": round(run.heldout_loss, 4),
            })
            print(rows[-1])

    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    print(f"\nwrote {len(rows)} rows to {args.out}")

    for lam in LAMBDAS:
        sp = [r["binarized_sparsity"] for r in rows if r["lam"] == lam]
        hl = [r["heldout_loss"] for r in rows if r["lam"] == lam]
        print(f"lambda {lam:g}: sparsity {np.mean(sp):.3f} +- {np.std(sp):.3f}  "
              f"heldout {np.mean(hl):.3f} +- {np.std(hl):.3f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
