"""Learning attention masks jointly with the model weights.

Each head carries a set of mask logits alpha.  During training a soft mask
M in (0,1)^{n x n} is sampled with the Gumbel-sigmoid

    M_ij = sigmoid((alpha_ij + G1 - G2) / tau),   G_k = -log(-log U_k),

plugged into the attention softmax through the additive renormalization
penalty, and an L1 term ``lam * sum(M)`` pushes the mask toward sparsity.
Weights and logits take one simultaneous gradient step per iteration; the
final mask is the noise-free sigmoid thresholded at 0.5.

Two parameterizations:

- unstructured: one logit per unordered position pair (alpha symmetric);
  the Gumbel noise pair is shared across (i,j)/(j,i) so every sample stays
  symmetric.
- structured: one logit per diagonal offset |i-j| in {1..n-2}, with noise
  shared along each diagonal line, the first/last row and column forced
  active, and the main diagonal forced inactive (a flag makes it a
  learnable extra offset).  Sampled masks are Toeplitz away from the forced
  border.

Setting ``use_gumbel=False`` and ``lam=0`` recovers plain sigmoid
relaxation: P = sigmoid(alpha) trained end-to-end with no noise, which is
how the soft attention-importance scores for two-stage pruning are fitted.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import transformer as tfm
from .masks import AttentionMask
from .numerics import Rng, sample_gumbel_array

VARIANTS = ("unstructured", "structured")


class DivergenceError(RuntimeError):
    """Loss became non-finite during mask learning."""


@dataclass
class DamConfig:
    variant: str = "unstructured"
    tau: float = 1.0
    lam: float = 0.0
    lr_w: float = 1.0
    lr_alpha: float = 3.0
    momentum: float = 0.0  # weights only; alpha always takes plain steps
    clip: float | None = 1.0  # global norm bound on the weight gradients
    init_alpha: float = 1.0
    # Penalty constant used while the mask is being learned.  It is kept far
    # below the enforcement default (1e4) on purpose: at 1e4 a soft-mask gap
    # of 0.005 already shifts a logit by 50, the attention entry underflows,
    # and its gradient dies, so the logits would freeze wherever the first
    # few noisy steps happened to push them.
    penalty: float = 16.0
    learn_diag: bool = False  # structured variant only
    use_gumbel: bool = True
    tau_final: float | None = None  # optional linear anneal target

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.tau <= 0 or (self.tau_final is not None and self.tau_final <= 0):
            raise ValueError("temperature must be positive")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


@dataclass
class DamState:
    """Mask logits for every head, plus the sampling hyperparameters."""

    cfg: DamConfig
    n: int
    heads: int
    alphas: np.ndarray  # unstructured: (H, n, n) symmetric; structured: (H, n_offsets)
    rng: Rng

    @classmethod
    def init(cls, cfg: DamConfig, n: int, heads: int, rng: Rng) -> "DamState":
        if cfg.variant == "unstructured":
            alphas = np.full((heads, n, n), float(cfg.init_alpha))
        else:
            if n < 4:
                raise ValueError("structured variant needs n >= 4")
            n_off = (n - 2) + (1 if cfg.learn_diag else 0)
            alphas = np.full((heads, n_off), float(cfg.init_alpha))
        return cls(cfg, n, heads, alphas, rng)

    def n_parameters(self) -> int:
        if self.cfg.variant == "unstructured":
            return self.heads * self.n * (self.n + 1) // 2
        return self.alphas.size

    def copy(self) -> "DamState":
        return DamState(self.cfg, self.n, self.heads, self.alphas.copy(),
                        Rng.from_state(self.rng.state))

    # -- structured helpers ------------------------------------------------
    def _offset_index(self) -> np.ndarray:
        """(n, n) map from cell to logit index; -1 diag (when fixed), -2 border."""
        n = self.n
        i, j = np.indices((n, n))
        k = np.abs(i - j)
        idx = np.where((k >= 1) & (k <= n - 2), k - 1, -1)
        if self.cfg.learn_diag:
            idx = np.where(k == 0, n - 2, idx)
        border = (i == 0) | (i == n - 1) | (j == 0) | (j == n - 1)
        return np.where(border, -2, idx)

    def expand(self, values: np.ndarray, diag_fill: float, border_fill: float) -> np.ndarray:
        """Broadcast per-offset values (H, n_off) to full (H, n, n) matrices."""
        idx = self._offset_index()
        full = np.take(values, np.maximum(idx, 0), axis=1)
        full = np.where(idx == -1, diag_fill, full)
        full = np.where(idx == -2, border_fill, full)
        return full

    def reduce(self, d_full: np.ndarray) -> np.ndarray:
        """Accumulate full-matrix gradients (H, n, n) onto the shared logits."""
        idx = self._offset_index()
        out = np.zeros_like(self.alphas)
        free = idx >= 0
        cells = idx[free]
        for h in range(self.heads):
            np.add.at(out[h], cells, d_full[h][free])
        return out


@dataclass
class SoftMaskSample:
    """A sampled soft mask plus what the backward pass needs."""

    masks: np.ndarray  # (H, n, n) in [0, 1]
    z: np.ndarray      # pre-sigmoid (alpha + noise) / tau, logit-shaped
    noise: np.ndarray  # shared Gumbel difference g1 - g2, logit-shaped
    tau: float


def sample_soft_mask(state: DamState, rng: Rng | None = None,
                     noise: np.ndarray | None = None,
                     tau: float | None = None) -> SoftMaskSample:
    """Draw a soft mask; symmetry/structure is preserved exactly by sharing
    one noise pair per free logit.  Pass ``noise`` to replay a sample."""
    rng = rng if rng is not None else state.rng
    tau = state.cfg.tau if tau is None else tau
    cfg = state.cfg
    if cfg.variant == "unstructured":
        n = state.n
        if noise is None:
            if cfg.use_gumbel:
                g = (sample_gumbel_array(rng, (state.heads, n, n))
                     - sample_gumbel_array(rng, (state.heads, n, n)))
                iu = np.triu_indices(n)
                for h in range(state.heads):  # mirror upper triangle
                    g[h].T[iu] = g[h][iu]
            else:
                g = np.zeros_like(state.alphas)
        else:
            g = noise
        z = (state.alphas + g) / tau
        return SoftMaskSample(_sigmoid(z), z, g, tau)

    if noise is None:
        if cfg.use_gumbel:
            g = (sample_gumbel_array(rng, state.alphas.shape)
                 - sample_gumbel_array(rng, state.alphas.shape))
        else:
            g = np.zeros_like(state.alphas)
    else:
        g = noise
    z = (state.alphas + g) / tau
    masks = state.expand(_sigmoid(z), diag_fill=0.0, border_fill=1.0)
    return SoftMaskSample(masks, z, g, tau)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def alpha_grad_from_mask_grad(state: DamState, sample: SoftMaskSample,
                              d_mask: np.ndarray) -> np.ndarray:
    """Chain d loss/d M (H, n, n) through the sigmoid onto the logits.

    Shared parameters collect the gradient of every cell they generate: both
    mirror cells for the unstructured variant, the whole diagonal line for
    the structured one.
    """
    sig_prime = lambda z: _sigmoid(z) * (1.0 - _sigmoid(z))
    if state.cfg.variant == "unstructured":
        g = d_mask + d_mask.transpose(0, 2, 1)
        idx = np.arange(state.n)
        g[:, idx, idx] = d_mask[:, idx, idx]
        return g * sig_prime(sample.z) / sample.tau
    reduced = state.reduce(d_mask)
    return reduced * sig_prime(sample.z) / sample.tau


def l1_term(sample: SoftMaskSample, lam: float) -> float:
    return float(lam * sample.masks.sum())


def dam_loss(params: tfm.ModelParams, model_cfg: tfm.TransformerConfig,
             state: DamState, tokens: np.ndarray, targets: np.ndarray,
             sample: SoftMaskSample, want_grads: bool = True):
    """Masked MLM loss plus L1 mask penalty.

    Returns (total, mlm_loss, l1, weight grads, alpha grads).  The alpha
    gradient combines the attention path (through the additive penalty) and
    the L1 term.
    """
    lam = state.cfg.lam
    learn_cfg = replace(model_cfg, mask_penalty=state.cfg.penalty)
    mlm, grads, dp = tfm.mlm_forward_loss(
        params, learn_cfg, tokens, targets, sample.masks, want_grads=want_grads
    )
    l1 = l1_term(sample, lam)
    total = mlm + l1
    if not want_grads:
        return total, mlm, l1, None, None
    d_mask = dp + lam
    d_alpha = alpha_grad_from_mask_grad(state, sample, d_mask)
    return total, mlm, l1, grads, d_alpha


def binarize(state: DamState) -> list[AttentionMask]:
    """Noise-free sigmoid thresholded at 0.5 (i.e. alpha >= 0), per head.

    Structured constraints are re-applied, so the output is deterministic
    and idempotent given alpha.
    """
    if state.cfg.variant == "unstructured":
        bits = (state.alphas >= 0.0).astype(np.uint8)
    else:
        full = state.expand((state.alphas >= 0.0).astype(np.float64),
                            diag_fill=0.0, border_fill=1.0)
        bits = full.astype(np.uint8)
    return [AttentionMask(b) for b in bits]


def binarized_sparsity(state: DamState) -> float:
    masks = binarize(state)
    total = sum(m.active_count() for m in masks)
    return 1.0 - total / (state.heads * state.n * state.n)


def soft_scores(state: DamState) -> np.ndarray:
    """Noise-free per-head attention scores sigmoid(alpha), shape (H, n, n)."""
    if state.cfg.variant == "unstructured":
        return _sigmoid(state.alphas)
    return state.expand(_sigmoid(state.alphas), diag_fill=0.0, border_fill=1.0)


def run_dam(params: tfm.ModelParams, model_cfg: tfm.TransformerConfig,
            state: DamState, batch_fn, steps: int, log=None):
    """One-level optimization: update weights and mask logits simultaneously.

    ``batch_fn(step)`` must yield ``(tokens, targets)``.  Mutates ``params``
    and ``state``; returns a list of per-step log rows.  Raises
    :class:`DivergenceError` if the loss leaves the reals.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    cfg = state.cfg
    rows = log if log is not None else []
    velocity = tfm.zeros_like_params(params) if cfg.momentum else None
    for step in range(steps):
        tau = cfg.tau
        if cfg.tau_final is not None and steps > 1:
            tau = cfg.tau + (cfg.tau_final - cfg.tau) * step / (steps - 1)
        tokens, targets = batch_fn(step)
        sample = sample_soft_mask(state, tau=tau)
        total, mlm, l1, grads, d_alpha = dam_loss(
            params, model_cfg, state, tokens, targets, sample
        )
        if not np.isfinite(total):
            raise DivergenceError(f"non-finite loss {total} at step {step}")
        if cfg.clip is not None:
            tfm.clip_grads_(grads, cfg.clip)
        if velocity is not None:
            for v, g in zip(velocity.arrays(), grads.arrays()):
                v *= cfg.momentum
                v += g
            tfm.update_params_(params, velocity, cfg.lr_w)
        else:
            tfm.update_params_(params, grads, cfg.lr_w)
        state.alphas -= cfg.lr_alpha * d_alpha
        rows.append({
            "step": step, "mlm_loss": mlm, "l1_term": l1, "total_loss": total,
            "binarized_sparsity": binarized_sparsity(state),
        })
    return rows
