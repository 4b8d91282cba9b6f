#!/usr/bin/env python3
"""Two-stage pruning study: learn soft attention scores, then compare
score-based against random pruning across drop fractions.

Usage:
    python scripts/pruning_sweep.py [--score-steps 3000] [--train-steps 1500] \
        [--seed 0] [--out prune_sweep.csv]
"""

import argparse
import csv
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from sparseattn.dam import DamConfig, DamState, run_dam, soft_scores  # noqa: E402
from sparseattn.numerics import Rng  # noqa: E402
from sparseattn.pruning import sparsity_sweep  # noqa: E402
from sparseattn.training import TrainConfig, Trainer  # noqa: E402

FRACTIONS = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--score-steps", type=int, default=3000)
    parser.add_argument("--train-steps", type=int, default=1500)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="prune_sweep.csv")
    args = parser.parse_args()

    # Stage 1: noise-free sigmoid relaxation learns the score matrix P.
    cfg = TrainConfig(steps=args.score_steps, seed=args.seed)
    trainer = Trainer(cfg)
    state = DamState.init(DamConfig(use_gumbel=False, lam=0.0),
                          cfg.model.n, cfg.model.heads, Rng(args.seed).spawn(5))
    run_dam(trainer.params, cfg.model, state,
            lambda s: trainer.sample_batch(), args.score_steps)
    scores = soft_scores(state)

    # Stage 2: threshold at each fraction and retrain under the fixed masks.
    sweep_cfg = TrainConfig(steps=args.train_steps, seed=args.seed)
    rows = sparsity_sweep(scores, FRACTIONS, sweep_cfg, rng_seed=args.seed)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    print(f"{'fraction':>8} {'scored':>8} {'random':>8}")
    for r in rows:
        print(f"{r['fraction']:8.2f} {r['loss_scored']:8.4f} {r['loss_random']:8.4f}")
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
