"""A deliberately small transformer encoder with hand-derived gradients.

Tokens get learned token-plus-position embeddings; each block is residual
self-attention followed by a residual two-layer ReLU feed-forward; scale
product and layer norm are omitted (a config flag can re-enable logit
scaling).  Attention can be soft-masked per head by a matrix
P in [0,1]^{n x n}: the default "renormalize" mode adds the penalty
``Q = -c (1 - P)`` to the attention logits before the softmax, which keeps
every attention row normalized, kills entries with P=0 outright for large c,
and leaves entries with P=1 untouched.  A "multiply" mode that scales the
softmax output by P elementwise is kept for comparison; its rows do not sum
to one.

Everything is float64 numpy; the backward pass is written out by hand and
checked against central finite differences in the test suite.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .numerics import Rng

MASK_MODES = ("renormalize", "multiply")


@dataclass(frozen=True)
class TransformerConfig:
    n: int = 16
    d: int = 32
    heads: int = 2
    d_ff: int = 64
    blocks: int = 2
    vocab: int = 64
    mask_penalty: float = 1e4  # "large constant" c in the additive mask
    scale_logits: bool = False
    mask_mode: str = "renormalize"

    def __post_init__(self):
        if min(self.n, self.d, self.heads, self.d_ff, self.blocks, self.vocab) < 1:
            raise ValueError("all dimensions must be >= 1")
        if self.d % self.heads != 0:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if self.mask_penalty <= 0:
            raise ValueError("mask_penalty must be positive")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask_mode must be one of {MASK_MODES}")

    @property
    def d_h(self) -> int:
        return self.d // self.heads

    def to_dict(self) -> dict:
        return {
            "n": self.n, "d": self.d, "heads": self.heads, "d_ff": self.d_ff,
            "blocks": self.blocks, "vocab": self.vocab,
            "mask_penalty": self.mask_penalty, "scale_logits": self.scale_logits,
            "mask_mode": self.mask_mode,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TransformerConfig":
        return cls(**doc)


TOY_CONFIG = TransformerConfig()


@dataclass
class BlockParams:
    wq: np.ndarray  # (H, d, d_h)
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray  # (d, d_ff)
    b1: np.ndarray  # (d_ff,)
    w2: np.ndarray  # (d_ff, d)
    b2: np.ndarray  # (d,)

    def arrays(self):
        return [self.wq, self.wk, self.wv, self.wo, self.w1, self.b1, self.w2, self.b2]


@dataclass
class ModelParams:
    embed: np.ndarray  # (vocab, d)
    pos_embed: np.ndarray  # (n, d), learned absolute positions
    blocks: list[BlockParams]
    out_proj: np.ndarray  # (d, vocab)

    def arrays(self):
        out = [self.embed, self.pos_embed]
        for b in self.blocks:
            out.extend(b.arrays())
        out.append(self.out_proj)
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.embed.copy(),
            self.pos_embed.copy(),
            [BlockParams(*[a.copy() for a in b.arrays()]) for b in self.blocks],
            self.out_proj.copy(),
        )


def init_params(cfg: TransformerConfig, rng: Rng, scale: float = 0.05) -> ModelParams:
    """Uniform(-scale, scale) init for every weight, seeded through ``rng``."""

    def u(*shape):
        return rng.uniform_array(shape, -scale, scale)

    blocks = [
        BlockParams(
            wq=u(cfg.heads, cfg.d, cfg.d_h), wk=u(cfg.heads, cfg.d, cfg.d_h),
            wv=u(cfg.heads, cfg.d, cfg.d_h), wo=u(cfg.heads, cfg.d, cfg.d_h),
            w1=u(cfg.d, cfg.d_ff), b1=u(cfg.d_ff), w2=u(cfg.d_ff, cfg.d), b2=u(cfg.d),
        )
        for _ in range(cfg.blocks)
    ]
    return ModelParams(embed=u(cfg.vocab, cfg.d), pos_embed=u(cfg.n, cfg.d),
                       blocks=blocks, out_proj=u(cfg.d, cfg.vocab))


def zeros_like_params(params: ModelParams) -> ModelParams:
    return ModelParams(
        np.zeros_like(params.embed),
        np.zeros_like(params.pos_embed),
        [BlockParams(*[np.zeros_like(a) for a in b.arrays()]) for b in params.blocks],
        np.zeros_like(params.out_proj),
    )


def update_params_(params: ModelParams, grads: ModelParams, lr: float) -> None:
    for p, g in zip(params.arrays(), grads.arrays()):
        p -= lr * g


def clip_grads_(grads: ModelParams, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``.

    Returns the pre-clip norm.  Without layer norm the toy model's loss
    surface has occasional cliffs; clipping keeps fixed-step SGD on it.
    """
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.arrays()))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.arrays():
            g *= scale
    return total


def params_to_vector(params: ModelParams) -> np.ndarray:
    return np.concatenate([a.ravel() for a in params.arrays()])


def vector_to_params(vec: np.ndarray, template: ModelParams) -> ModelParams:
    out = template.copy()
    offset = 0
    for a in out.arrays():
        a[...] = vec[offset : offset + a.size].reshape(a.shape)
        offset += a.size
    if offset != vec.size:
        raise ValueError("vector length does not match parameter count")
    return out


def _softmax_last(s: np.ndarray) -> np.ndarray:
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def mask_penalty_matrix(p: np.ndarray, c: float) -> np.ndarray:
    """Additive logit penalty -c (1 - P); zero where P=1, -c where P=0."""
    return -c * (1.0 - p)


def attention_matrix(x: np.ndarray, wq: np.ndarray, wk: np.ndarray,
                     scale: bool = False) -> np.ndarray:
    """Row-stochastic attention softmax((X Wq)(X Wk)^T) for one head."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != wq.shape[0]:
        raise ValueError(f"input shape {x.shape} does not match weights {wq.shape}")
    s = (x @ wq) @ (x @ wk).T
    if scale:
        s = s / np.sqrt(wq.shape[1])
    return _softmax_last(s)


def masked_attention_matrix(x: np.ndarray, wq: np.ndarray, wk: np.ndarray,
                            p: np.ndarray, c: float, scale: bool = False) -> np.ndarray:
    """Attention with the additive soft-mask penalty inside the softmax.

    Rows remain normalized for any P.  If a whole row of P is zero, every
    logit in that row receives the same -c penalty and the softmax returns a
    uniform row; the residual path is what carries such a token through.
    """
    x = np.asarray(x, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (x.shape[0], x.shape[0]):
        raise ValueError(f"soft mask shape {p.shape} does not match n={x.shape[0]}")
    s = (x @ wq) @ (x @ wk).T
    if scale:
        s = s / np.sqrt(wq.shape[1])
    return _softmax_last(s + mask_penalty_matrix(p, c))


def attention_layer_forward(x: np.ndarray, block: BlockParams, cfg: TransformerConfig,
                            p_heads: np.ndarray | None = None) -> np.ndarray:
    """Residual multi-head attention output for a single sequence (n x d)."""
    out, _ = _attention_forward(x[None], block, cfg, p_heads)
    return out[0]


def feedforward_forward(z: np.ndarray, block: BlockParams) -> np.ndarray:
    """Residual two-layer ReLU feed-forward for a single sequence (n x d)."""
    out, _ = _ff_forward(z[None], block)
    return out[0]


def _attention_forward(x, block, cfg, p_heads):
    """Batched attention. x: (B,n,d); p_heads: (H,n,n) or None."""
    q = np.einsum("bnd,hde->bhne", x, block.wq)
    k = np.einsum("bnd,hde->bhne", x, block.wk)
    v = np.einsum("bnd,hde->bhne", x, block.wv)
    s = np.einsum("bhne,bhme->bhnm", q, k)
    sc = 1.0 / np.sqrt(cfg.d_h) if cfg.scale_logits else 1.0
    if sc != 1.0:
        s = s * sc
    p = None
    if p_heads is not None:
        p = np.asarray(p_heads, dtype=np.float64)
        if cfg.mask_mode == "renormalize":
            s = s + mask_penalty_matrix(p, cfg.mask_penalty)[None]
    a_raw = _softmax_last(s)
    if p_heads is not None and cfg.mask_mode == "multiply":
        a = a_raw * p[None]
    else:
        a = a_raw
    hv = np.einsum("bhnm,bhme->bhne", a, v)
    out = x + np.einsum("bhne,hde->bnd", hv, block.wo)
    cache = {"x": x, "q": q, "k": k, "v": v, "a_raw": a_raw, "a": a, "hv": hv,
             "p": p, "scale": sc}
    return out, cache


def _attention_backward(d_out, block, cfg, cache, grads: BlockParams):
    """Returns (dx, dp) where dp is the per-head soft-mask gradient (H,n,n)."""
    x, q, k, v = cache["x"], cache["q"], cache["k"], cache["v"]
    a_raw, a, hv, p, sc = cache["a_raw"], cache["a"], cache["hv"], cache["p"], cache["scale"]

    dx = d_out.copy()
    grads.wo += np.einsum("bhne,bnd->hde", hv, d_out)
    dhv = np.einsum("bnd,hde->bhne", d_out, block.wo)
    da = np.einsum("bhne,bhme->bhnm", dhv, v)
    dv = np.einsum("bhnm,bhne->bhme", a, dhv)

    dp = None
    if p is not None and cfg.mask_mode == "multiply":
        dp = np.einsum("bhnm->hnm", da * a_raw)
        da = da * p[None]
    # softmax backward
    ds = a_raw * (da - (da * a_raw).sum(axis=-1, keepdims=True))
    if p is not None and cfg.mask_mode == "renormalize":
        dp = cfg.mask_penalty * np.einsum("bhnm->hnm", ds)
    if sc != 1.0:
        ds = ds * sc

    dq = np.einsum("bhnm,bhme->bhne", ds, k)
    dk = np.einsum("bhnm,bhne->bhme", ds, q)
    grads.wq += np.einsum("bnd,bhne->hde", x, dq)
    grads.wk += np.einsum("bmd,bhme->hde", x, dk)
    grads.wv += np.einsum("bmd,bhme->hde", x, dv)
    dx += np.einsum("bhne,hde->bnd", dq, block.wq)
    dx += np.einsum("bhme,hde->bmd", dk, block.wk)
    dx += np.einsum("bhme,hde->bmd", dv, block.wv)
    return dx, dp


def _ff_forward(z, block):
    h_pre = z @ block.w1 + block.b1
    h = np.maximum(h_pre, 0.0)
    out = z + h @ block.w2 + block.b2
    return out, {"z": z, "h_pre": h_pre, "h": h}


def _ff_backward(d_out, block, cache, grads: BlockParams):
    z, h_pre, h = cache["z"], cache["h_pre"], cache["h"]
    dz = d_out.copy()
    grads.w2 += np.einsum("bnf,bnd->fd", h, d_out)
    grads.b2 += d_out.sum(axis=(0, 1))
    dh = d_out @ block.w2.T
    dh_pre = dh * (h_pre > 0.0)
    grads.w1 += np.einsum("bnd,bnf->df", z, dh_pre)
    grads.b1 += dh_pre.sum(axis=(0, 1))
    dz += dh_pre @ block.w1.T
    return dz


def forward(params: ModelParams, cfg: TransformerConfig, tokens: np.ndarray,
            p_heads: np.ndarray | None = None):
    """Run the full stack; returns (logits (B,n,vocab), caches)."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[1] != cfg.n:
        raise ValueError(f"tokens must be (B, {cfg.n}), got {tokens.shape}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab:
        raise ValueError("token id out of range")
    x = params.embed[tokens] + params.pos_embed[None, :, :]
    caches = []
    for block in params.blocks:
        x, att_cache = _attention_forward(x, block, cfg, p_heads)
        x, ff_cache = _ff_forward(x, block)
        caches.append((att_cache, ff_cache))
    logits = x @ params.out_proj
    return logits, {"tokens": tokens, "x_final": x, "caches": caches}


def mlm_loss_from_logits(logits: np.ndarray, targets: np.ndarray):
    """Mean cross-entropy over positions with targets >= 0.

    Returns (loss, dlogits); ``dlogits`` is already divided by the number of
    prediction positions.
    """
    targets = np.asarray(targets)
    mask = targets >= 0
    count = int(mask.sum())
    if count == 0:
        raise ValueError("batch contains no prediction positions")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1))
    tgt = np.where(mask, targets, 0)
    tok_logp = np.take_along_axis(shifted, tgt[..., None], axis=-1)[..., 0] - logz
    loss = -float(tok_logp[mask].sum()) / count

    probs = np.exp(shifted - logz[..., None])
    dlogits = probs
    np.put_along_axis(
        dlogits, tgt[..., None],
        np.take_along_axis(dlogits, tgt[..., None], axis=-1) - 1.0, axis=-1,
    )
    dlogits *= mask[..., None] / count
    return loss, dlogits


def mlm_forward_loss(params: ModelParams, cfg: TransformerConfig, tokens: np.ndarray,
                     targets: np.ndarray, p_heads: np.ndarray | None = None,
                     want_grads: bool = True):
    """MLM loss and, optionally, gradients for every weight and the soft mask.

    Returns (loss, grads, dp_heads); grads is ``ModelParams``-shaped and
    dp_heads is (H, n, n) summed over blocks and batch (None when no soft
    mask was supplied or ``want_grads`` is false).
    """
    logits, state = forward(params, cfg, tokens, p_heads)
    loss, dlogits = mlm_loss_from_logits(logits, targets)
    if not want_grads:
        return loss, None, None

    grads = zeros_like_params(params)
    dp_total = None if p_heads is None else np.zeros((cfg.heads, cfg.n, cfg.n))

    grads.out_proj += np.einsum("bnd,bnv->dv", state["x_final"], dlogits)
    dx = dlogits @ params.out_proj.T
    for block, gblock, (att_cache, ff_cache) in zip(
        reversed(params.blocks), reversed(grads.blocks), reversed(state["caches"])
    ):
        dx = _ff_backward(dx, block, ff_cache, gblock)
        dx, dp = _attention_backward(dx, block, cfg, att_cache, gblock)
        if dp is not None:
            dp_total += dp
    np.add.at(grads.embed, state["tokens"].ravel(), dx.reshape(-1, cfg.d))
    grads.pos_embed += dx.sum(axis=0)
    return loss, grads, dp_total


def save_checkpoint(path, cfg: TransformerConfig, params: ModelParams,
                    extra: dict | None = None) -> None:
    """JSON checkpoint; float64 values survive the round trip bit-exactly."""
    doc = {
        "config": cfg.to_dict(),
        "params": {
            "embed": params.embed.ravel().tolist(),
            "pos_embed": params.pos_embed.ravel().tolist(),
            "out_proj": params.out_proj.ravel().tolist(),
            "blocks": [
                {name: getattr(b, name).ravel().tolist()
                 for name in ("wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2")}
                for b in params.blocks
            ],
        },
    }
    if extra:
        doc["extra"] = extra
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_checkpoint(path):
    """Returns (config, params, extra)."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    cfg = TransformerConfig.from_dict(doc["config"])
    template = init_params(cfg, Rng(0))
    p = doc["params"]

    def arr(values, like):
        a = np.asarray(values, dtype=np.float64).reshape(like.shape)
        return a

    blocks = [
        BlockParams(*[arr(bl[name], getattr(tb, name))
                      for name in ("wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2")])
        for bl, tb in zip(p["blocks"], template.blocks)
    ]
    params = ModelParams(arr(p["embed"], template.embed),
                         arr(p["pos_embed"], template.pos_embed), blocks,
                         arr(p["out_proj"], template.out_proj))
    return cfg, params, doc.get("extra")
