"""Toy MLM training loops: fixed-mask pre-training, joint mask learning,
metrics, and resumable checkpoints.

A mask source names how the per-head soft masks are produced:

- ``full``: all positions active
- ``no-diag``: all active except the diagonal
- ``random-drop``: ``full`` with the diagonal's worth of entries (n per
  head) removed at random
- ``file:<path>`` / explicit masks: any fixed binary mask per head
- ``dam``: masks are sampled and learned jointly during training

Runs are deterministic in (config, seed): every random choice flows through
the counter-based generator, whose counters are part of the checkpoint.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import dam as dam_mod
from . import transformer as tfm
from .corpus import CorpusConfig, make_corpus, mlm_batch
from .masks import AttentionMask
from .numerics import Rng

MASK_SOURCES = ("full", "no-diag", "random-drop", "fixed", "dam")


@dataclass(frozen=True)
class TrainConfig:
    model: tfm.TransformerConfig = tfm.TOY_CONFIG
    corpus: CorpusConfig = CorpusConfig()
    steps: int = 500
    batch_size: int = 8
    lr: float = 1.0
    momentum: float = 0.0  # plain SGD by default
    clip: float | None = 1.0  # global gradient-norm bound; None disables
    mask_fraction: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.model.n != self.corpus.n:
            raise ValueError("model and corpus sequence lengths differ")
        if self.model.vocab != self.corpus.vocab:
            raise ValueError("model and corpus vocab sizes differ")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


@dataclass
class TrainRun:
    """Frozen record of one training run."""

    config: dict
    metrics: list[dict]
    heldout_loss: float
    seed: int
    wall_clock: float

    def to_json(self) -> str:
        return json.dumps({
            "config": self.config, "seed": self.seed,
            "heldout_loss": self.heldout_loss, "wall_clock": self.wall_clock,
            "metrics": self.metrics,
        }, indent=1)

    def metrics_csv(self, header_comment: str | None = None) -> str:
        buf = io.StringIO()
        if header_comment:
            buf.write(f"# {header_comment}\n")
        if self.metrics:
            writer = csv.DictWriter(buf, fieldnames=list(self.metrics[0].keys()))
            writer.writeheader()
            writer.writerows(self.metrics)
        return buf.getvalue()


def full_soft_masks(model_cfg: tfm.TransformerConfig) -> np.ndarray:
    return np.ones((model_cfg.heads, model_cfg.n, model_cfg.n))


def no_diag_soft_masks(model_cfg: tfm.TransformerConfig) -> np.ndarray:
    p = full_soft_masks(model_cfg)
    idx = np.arange(model_cfg.n)
    p[:, idx, idx] = 0.0
    return p


def random_drop_soft_masks(model_cfg: tfm.TransformerConfig, count: int,
                           rng: Rng) -> np.ndarray:
    """Drop exactly ``count`` uniformly chosen cells from the full mask.

    One mask is drawn and shared by every head, mirroring the no-diag
    variant, which removes the same n cells from all heads at once.
    """
    from .masks import random_drop

    full = AttentionMask(np.ones((model_cfg.n, model_cfg.n), dtype=np.uint8))
    bits = random_drop(full, count, rng).bits.astype(np.float64)
    return np.broadcast_to(bits, (model_cfg.heads, model_cfg.n, model_cfg.n)).copy()


def masks_to_soft(masks: list[AttentionMask], model_cfg: tfm.TransformerConfig) -> np.ndarray:
    """Fixed binary masks (one per head, or one shared) as soft-mask arrays."""
    if len(masks) == 1:
        masks = masks * model_cfg.heads
    if len(masks) != model_cfg.heads:
        raise ValueError(f"expected 1 or {model_cfg.heads} masks, got {len(masks)}")
    for m in masks:
        if m.n != model_cfg.n:
            raise ValueError(f"mask size {m.n} does not match model n={model_cfg.n}")
    return np.stack([m.bits.astype(np.float64) for m in masks])


class Trainer:
    """SGD over the toy MLM objective under a fixed per-head soft mask."""

    def __init__(self, cfg: TrainConfig, p_heads: np.ndarray | None = None):
        self.cfg = cfg
        self.p_heads = full_soft_masks(cfg.model) if p_heads is None else p_heads
        self.train_set, self.heldout_set = make_corpus(cfg.corpus)
        root = Rng(cfg.seed)
        self.init_rng = root.spawn(1)
        self.batch_rng = root.spawn(2)
        self.eval_rng = root.spawn(3)
        self.params = tfm.init_params(cfg.model, self.init_rng)
        self.velocity = tfm.zeros_like_params(self.params) if cfg.momentum else None
        self.metrics: list[dict] = []
        self.step_count = 0
        # Held-out prediction positions are fixed once so that runs differing
        # only in their attention mask are scored on identical batches.
        self._eval_batch = mlm_batch(self.heldout_set, self.eval_rng, cfg.mask_fraction)

    def sample_batch(self):
        idx = np.array([self.batch_rng.randint(len(self.train_set))
                        for _ in range(self.cfg.batch_size)])
        return mlm_batch(self.train_set[idx], self.batch_rng, self.cfg.mask_fraction)

    def step(self) -> dict:
        tokens, targets = self.sample_batch()
        loss, grads, _ = tfm.mlm_forward_loss(
            self.params, self.cfg.model, tokens, targets, self.p_heads
        )
        if not np.isfinite(loss):
            raise dam_mod.DivergenceError(f"non-finite loss at step {self.step_count}")
        if self.cfg.clip is not None:
            tfm.clip_grads_(grads, self.cfg.clip)
        if self.velocity is not None:
            for v, g in zip(self.velocity.arrays(), grads.arrays()):
                v *= self.cfg.momentum
                v += g
            tfm.update_params_(self.params, self.velocity, self.cfg.lr)
        else:
            tfm.update_params_(self.params, grads, self.cfg.lr)
        row = {"step": self.step_count, "loss": loss}
        self.metrics.append(row)
        self.step_count += 1
        return row

    def heldout_loss(self) -> float:
        tokens, targets = self._eval_batch
        loss, _, _ = tfm.mlm_forward_loss(
            self.params, self.cfg.model, tokens, targets, self.p_heads, want_grads=False
        )
        return loss

    def run(self, steps: int | None = None) -> TrainRun:
        t0 = time.perf_counter()
        for _ in range(self.cfg.steps if steps is None else steps):
            self.step()
        return TrainRun(
            config=_config_dict(self.cfg), metrics=list(self.metrics),
            heldout_loss=self.heldout_loss(), seed=self.cfg.seed,
            wall_clock=time.perf_counter() - t0,
        )

    # -- checkpointing ------------------------------------------------------
    def save_checkpoint(self, path) -> None:
        extra = {
            "step_count": self.step_count,
            "batch_rng": self.batch_rng.state,
            "p_heads": self.p_heads.ravel().tolist(),
            "train_config": _config_dict(self.cfg),
        }
        if self.velocity is not None:
            extra["velocity"] = tfm.params_to_vector(self.velocity).tolist()
        tfm.save_checkpoint(path, self.cfg.model, self.params, extra=extra)

    def load_checkpoint(self, path) -> None:
        _, params, extra = tfm.load_checkpoint(path)
        self.params = params
        self.step_count = extra["step_count"]
        self.batch_rng = Rng.from_state(tuple(extra["batch_rng"]))
        self.p_heads = np.asarray(extra["p_heads"]).reshape(self.p_heads.shape)
        if "velocity" in extra:
            self.velocity = tfm.vector_to_params(
                np.asarray(extra["velocity"]), tfm.zeros_like_params(self.params)
            )


def _config_dict(cfg: TrainConfig) -> dict:
    return {
        "model": cfg.model.to_dict(),
        "corpus": cfg.corpus.__dict__.copy(),
        "steps": cfg.steps, "batch_size": cfg.batch_size, "lr": cfg.lr,
        "mask_fraction": cfg.mask_fraction, "seed": cfg.seed,
    }


def resolve_soft_masks(source: str, cfg: TrainConfig,
                       fixed_masks: list[AttentionMask] | None = None) -> np.ndarray:
    if source == "full":
        return full_soft_masks(cfg.model)
    if source == "no-diag":
        return no_diag_soft_masks(cfg.model)
    if source == "random-drop":
        return random_drop_soft_masks(cfg.model, cfg.model.n, Rng(cfg.seed).spawn(4))
    if source == "fixed":
        if not fixed_masks:
            raise ValueError("mask source 'fixed' needs explicit masks")
        return masks_to_soft(fixed_masks, cfg.model)
    raise ValueError(f"unknown mask source {source!r} (use train_dam for 'dam')")


def train(cfg: TrainConfig, mask_source: str = "full",
          fixed_masks: list[AttentionMask] | None = None) -> TrainRun:
    """Train under a fixed mask source and report the final held-out loss."""
    trainer = Trainer(cfg, resolve_soft_masks(mask_source, cfg, fixed_masks))
    return trainer.run()


def train_dam(cfg: TrainConfig, dam_cfg: dam_mod.DamConfig,
              finetune_steps: int = 0):
    """Joint mask learning, then optional fine-tuning under the frozen mask.

    Returns (masks per head, TrainRun, DamState).  The TrainRun's held-out
    loss is measured under the final binarized mask -- after fine-tuning if
    ``finetune_steps`` > 0.
    """
    trainer = Trainer(cfg)  # provides corpus, params, batch stream
    state = dam_mod.DamState.init(dam_cfg, cfg.model.n, cfg.model.heads,
                                  Rng(cfg.seed).spawn(5))
    t0 = time.perf_counter()
    rows = dam_mod.run_dam(
        trainer.params, cfg.model, state,
        lambda step: trainer.sample_batch(), cfg.steps,
    )
    masks = dam_mod.binarize(state)
    trainer.p_heads = masks_to_soft(masks, cfg.model)
    for _ in range(finetune_steps):
        trainer.step()
    run = TrainRun(
        config=_config_dict(cfg), metrics=rows + trainer.metrics,
        heldout_loss=trainer.heldout_loss(), seed=cfg.seed,
        wall_clock=time.perf_counter() - t0,
    )
    return masks, run, state
