"""Two-stage mask generation: fit soft attention scores first, then
threshold the smallest entries away, plus the random baseline and a
sparsity sweep comparing the two on the toy task.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .masks import AttentionMask, MaskError
from .numerics import Rng


def prune_by_scores(p: np.ndarray, drop_fraction: float) -> AttentionMask:
    """Zero the ``floor(drop_fraction * n^2)`` entries with the smallest
    scores; ties break by (row, col) so the result is deterministic.

    Depends only on the ordering of ``p``: any strictly increasing transform
    of the scores yields the same mask.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise MaskError(f"score matrix must be square, got {p.shape}")
    if not 0.0 <= drop_fraction < 1.0:
        raise MaskError("drop_fraction must lie in [0, 1)")
    n = p.shape[0]
    k = int(drop_fraction * n * n)
    rows, cols = np.divmod(np.arange(n * n), n)
    order = np.lexsort((cols, rows, p.ravel()))  # value, then row, then col
    bits = np.ones(n * n, dtype=np.uint8)
    bits[order[:k]] = 0
    return AttentionMask(bits.reshape(n, n))


def prune_by_scores_per_head(p_heads: np.ndarray, drop_fraction: float) -> list[AttentionMask]:
    return [prune_by_scores(p, drop_fraction) for p in p_heads]


def prune_random(n: int, drop_fraction: float, rng: Rng) -> AttentionMask:
    """Drop the same number of entries uniformly at random; seeded."""
    if not 0.0 <= drop_fraction < 1.0:
        raise MaskError("drop_fraction must lie in [0, 1)")
    k = int(drop_fraction * n * n)
    bits = np.ones(n * n, dtype=np.uint8)
    bits[rng.choice_without_replacement(n * n, k)] = 0
    return AttentionMask(bits.reshape(n, n))


def prune_random_per_head(n: int, heads: int, drop_fraction: float,
                          rng: Rng) -> list[AttentionMask]:
    return [prune_random(n, drop_fraction, rng) for _ in range(heads)]


def sparsity_sweep(p_heads: np.ndarray, fractions, train_cfg, rng_seed: int = 0):
    """Train the toy model under score-pruned and random-pruned masks at each
    drop fraction, with matched seeds, and log the held-out MLM losses.

    Returns a list of row dicts: fraction, sparsity, loss_scored,
    loss_random, seed.
    """
    from .training import Trainer, masks_to_soft

    fractions = list(fractions)
    if any(not 0.0 <= f < 1.0 for f in fractions):
        raise MaskError("fractions must lie in [0, 1)")
    if sorted(fractions) != fractions:
        raise MaskError("fractions must be sorted ascending")

    heads = p_heads.shape[0]
    n = p_heads.shape[1]
    rows = []
    for f in fractions:
        scored = prune_by_scores_per_head(p_heads, f)
        random_ = prune_random_per_head(n, heads, f, Rng(rng_seed).spawn(int(f * 1e6)))
        losses = {}
        for arm, masks in (("scored", scored), ("random", random_)):
            trainer = Trainer(train_cfg, masks_to_soft(masks, train_cfg.model))
            losses[arm] = trainer.run().heldout_loss
        rows.append({
            "fraction": f,
            "sparsity": 1.0 - sum(m.active_count() for m in scored) / (heads * n * n),
            "loss_scored": losses["scored"],
            "loss_random": losses["random"],
            "seed": train_cfg.seed,
        })
    return rows
