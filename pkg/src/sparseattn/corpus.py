"""Synthetic token sequences for the toy masked-language-model task.

Two generators:

- ``markov``: an order-2 Markov chain over the content vocabulary whose
  transition rows are concentrated on a few successors, so context genuinely
  predicts the next token (a bigram model beats a unigram model on held-out
  data -- asserted in the tests).
- ``copy``: the first half of each sequence is random and the second half
  repeats it with a little resampling noise, giving long-range structure.

Every sequence is exactly ``n`` tokens: [CLS], n-2 content tokens, [SEP].
Corpora are regenerated from their config; they are never stored on disk.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Rng

PAD, CLS, SEP, MASK = 0, 1, 2, 3
N_SPECIAL = 4

GENERATORS = ("markov", "copy")


@dataclass(frozen=True)
class CorpusConfig:
    vocab: int = 64
    n: int = 16
    generator: str = "markov"
    train_size: int = 512
    heldout_size: int = 128
    seed: int = 0
    branching: int = 3  # preferred successors per (prev2, prev1) context
    copy_noise: float = 0.1

    def __post_init__(self):
        if self.vocab <= N_SPECIAL:
            raise ValueError(f"vocab must exceed the {N_SPECIAL} reserved ids")
        if self.n < 4:
            raise ValueError("n must be >= 4")
        if self.generator not in GENERATORS:
            raise ValueError(f"generator must be one of {GENERATORS}")

    @property
    def content_vocab(self) -> int:
        return self.vocab - N_SPECIAL


def _markov_tables(cfg: CorpusConfig, rng: Rng):
    """Per-context successor candidates and cumulative weights.

    The first ``branching - 1`` preferred successors depend on the previous
    token only, the last one on the token before that, so order-1 context is
    strongly predictive and order-2 context strictly more so.  A 5% uniform
    escape mass keeps every transition possible.
    """
    v = cfg.content_vocab
    by_prev1 = np.empty((v, cfg.branching - 1), dtype=np.int64)
    for b in range(v):
        by_prev1[b] = rng.choice_without_replacement(v, cfg.branching - 1)
    by_prev2 = np.array([rng.randint(v) for _ in range(v)], dtype=np.int64)
    cand = np.empty((v, v, cfg.branching), dtype=np.int64)
    for a in range(v):
        for b in range(v):
            cand[a, b, : cfg.branching - 1] = by_prev1[b]
            cand[a, b, cfg.branching - 1] = by_prev2[a]
    w = np.array([4.0 ** -i for i in range(cfg.branching)])
    w = 0.97 * w / w.sum()
    cum = np.cumsum(w)
    return cand, cum


def _sample_markov(cfg: CorpusConfig, cand, cum, rng: Rng) -> np.ndarray:
    v = cfg.content_vocab
    content = np.empty(cfg.n - 2, dtype=np.int64)
    a, b = rng.randint(v), rng.randint(v)
    for t in range(cfg.n - 2):
        u = rng.uniform()
        if u < cum[-1]:
            nxt = int(cand[a, b, int(np.searchsorted(cum, u, side="right"))])
        else:
            nxt = rng.randint(v)
        content[t] = nxt
        a, b = b, nxt
    return content


def _sample_copy(cfg: CorpusConfig, rng: Rng) -> np.ndarray:
    v = cfg.content_vocab
    length = cfg.n - 2
    half = (length + 1) // 2
    content = np.empty(length, dtype=np.int64)
    for t in range(half):
        content[t] = rng.randint(v)
    for t in range(half, length):
        src = content[t - half]
        content[t] = rng.randint(v) if rng.uniform() < cfg.copy_noise else src
    return content


def make_corpus(cfg: CorpusConfig):
    """Deterministic (train, heldout) int arrays of shape (size, n).

    Held-out sequences that collide with a training sequence are redrawn, so
    the two sets are disjoint.
    """
    rng = Rng(cfg.seed).spawn(0xC0)
    cand = cum = None
    if cfg.generator == "markov":
        cand, cum = _markov_tables(cfg, rng)

    def draw():
        content = (_sample_markov(cfg, cand, cum, rng) if cfg.generator == "markov"
                   else _sample_copy(cfg, rng))
        return np.concatenate(([CLS], content + N_SPECIAL, [SEP]))

    train = np.stack([draw() for _ in range(cfg.train_size)])
    seen = {row.tobytes() for row in train}
    heldout = []
    while len(heldout) < cfg.heldout_size:
        row = draw()
        if row.tobytes() not in seen:
            heldout.append(row)
    return train, np.stack(heldout)


def mlm_batch(sequences: np.ndarray, rng: Rng, mask_fraction: float = 0.15):
    """Mask positions for prediction; returns (inputs, targets).

    Per sequence, ``max(1, floor(fraction * candidates))`` content positions
    are replaced by [MASK]; special tokens are never selected.  ``targets``
    holds the original id at masked positions and -1 elsewhere.
    """
    if not 0.0 <= mask_fraction < 1.0:
        raise ValueError("mask_fraction must lie in [0, 1)")
    seqs = np.asarray(sequences)
    inputs = seqs.copy()
    targets = np.full_like(seqs, -1)
    for row_in, row_tgt, row in zip(inputs, targets, seqs):
        candidates = np.flatnonzero(row >= N_SPECIAL)
        k = max(1, int(mask_fraction * candidates.size))
        picked = candidates[rng.choice_without_replacement(candidates.size, k)]
        row_tgt[picked] = row[picked]
        row_in[picked] = MASK
    return inputs, targets


def ngram_heldout_loss(train: np.ndarray, heldout: np.ndarray, order: int,
                       vocab: int, alpha: float = 1.0) -> float:
    """Held-out NLL of an add-alpha-smoothed n-gram model over content tokens.

    Used as an independent check that the corpus carries learnable context.
    """
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    content = lambda seqs: [row[1:-1] for row in seqs]
    if order == 1:
        counts = np.full(vocab, alpha)
        for row in content(train):
            np.add.at(counts, row, 1.0)
        logp = np.log(counts / counts.sum())
        tot, n = 0.0, 0
        for row in content(heldout):
            tot -= logp[row].sum()
            n += row.size
        return tot / n
    counts = {}
    for row in content(train):
        for t in range(1, row.size):
            key = int(row[t - 1])
            counts.setdefault(key, np.full(vocab, alpha))[row[t]] += 1.0
    fallback = np.full(vocab, alpha)
    tot, n = 0.0, 0
    for row in content(heldout):
        for t in range(1, row.size):
            c = counts.get(int(row[t - 1]), fallback)
            tot -= np.log(c[row[t]] / c.sum())
            n += 1
    return tot / n
