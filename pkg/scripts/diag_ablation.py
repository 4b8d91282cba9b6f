#!/usr/bin/env python3
"""Diagonal-attention ablation: full mask vs no-diagonal vs matched random
drops, trained with identical seeds, plus the learned-score view of the
diagonal.

Usage:
    python scripts/diag_ablation.py [--steps 4000] [--seeds 5]
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

import numpy as np  # noqa: E402

from sparseattn.dam import DamConfig, DamState, run_dam, soft_scores  # noqa: E402
from sparseattn.numerics import Rng  # noqa: E402
from sparseattn.training import (  # noqa: E402
    TrainConfig,
    Trainer,
    full_soft_masks,
    no_diag_soft_masks,
    random_drop_soft_masks,
)


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--steps", type=int, default=4000)
    parser.add_argument("--seeds", type=int, default=5)
    args = parser.parse_args()

    results = {"full": [], "no-diag": [], "random-drop": []}
    for seed in range(args.seeds):
        for name in results:
            cfg = TrainConfig(steps=args.steps, seed=seed)
            if name == "full":
                p = full_soft_masks(cfg.model)
            elif name == "no-diag":
                p = no_diag_soft_masks(cfg.model)
            else:
                p = random_drop_soft_masks(cfg.model, cfg.model.n, Rng(seed).spawn(4))
            results[name].append(Trainer(cfg, p).run().heldout_loss)
        print(f"seed {seed}: " + "  ".join(
            f"{k} {v[-1]:.4f}" for k, v in results.items()))

    print()
    for name, vals in results.items():
        print(f"{name:12s} mean {np.mean(vals):.4f}  std {np.std(vals):.4f}")

    # learned soft scores: how does the diagonal compare to everything else?
    cfg = TrainConfig(steps=2000, seed=0)
    trainer = Trainer(cfg)
    state = DamState.init(DamConfig(use_gumbel=True, lam=1e-3),
                          cfg.model.n, cfg.model.heads, Rng(0).spawn(5))
    run_dam(trainer.params, cfg.model, state,
            lambda s: trainer.sample_batch(), cfg.steps)
    p = soft_scores(state)
    eye = np.eye(cfg.model.n, dtype=bool)
    diag = float(p[:, eye].mean())
    off = float(p[:, ~eye].mean())
    print(f"\nlearned scores: diagonal mean {diag:.4f} vs off-diagonal mean {off:.4f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
