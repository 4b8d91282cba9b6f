"""Binary attention masks: the six classic sparse patterns plus utilities.

A mask is an n x n 0/1 matrix; entry (i, j) = 1 means token i may attend to
token j.  All generators are deterministic in (spec, seed).  By default the
result is symmetrized (OR with its own transpose) to match the bidirectional
setting the rest of the package trains in; pass ``symmetrize=False`` to see
the raw one-directional construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .numerics import Rng

KINDS = ("star", "logsparse", "strided", "fixed", "longformer", "bigbird", "full", "random")


class MaskError(ValueError):
    """Invalid mask parameters or malformed mask file."""


@dataclass(frozen=True)
class AttentionMask:
    """Immutable n x n binary mask."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2 or bits.shape[0] != bits.shape[1] or bits.shape[0] == 0:
            raise MaskError(f"mask must be square and non-empty, got {bits.shape}")
        if not np.isin(bits, (0, 1)).all():
            raise MaskError("mask entries must be 0 or 1")
        object.__setattr__(self, "bits", bits.astype(np.uint8))
        self.bits.setflags(write=False)

    @property
    def n(self) -> int:
        return self.bits.shape[0]

    def active_count(self) -> int:
        return int(self.bits.sum())

    def sparsity(self) -> float:
        """1 - |active| / n^2, computed from exact integer counts."""
        return 1.0 - self.active_count() / (self.n * self.n)

    def is_symmetric(self) -> bool:
        return bool((self.bits == self.bits.T).all())

    def __eq__(self, other):
        return isinstance(other, AttentionMask) and np.array_equal(self.bits, other.bits)


@dataclass(frozen=True)
class MaskSpec:
    """Parameters selecting one mask construction.

    Only the fields relevant to ``kind`` are read:

    - strided / fixed: ``stride`` (local block/window length)
    - longformer: ``window`` (half-width), ``n_global`` seeded-random global
      positions
    - bigbird: ``window`` (half-width), ``n_global`` leading/trailing global
      tokens, ``n_random`` random symmetric links per row
    - random: ``drop_fraction`` of entries removed from the full mask

    Defaults reproduce the reference sparsity ratios at n=128 (see
    ``reference_sparsities``); they are deliberate choices, not universal
    constants, and some differ from the verbal parameter descriptions that
    usually accompany these patterns (see README).
    """

    kind: str
    n: int
    stride: int | None = None
    window: int | None = None
    n_global: int = 2
    n_random: int = 1
    drop_fraction: float = 0.0
    seed: int = 0
    symmetrize: bool = True
    keep_diag: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise MaskError(f"unknown mask kind {self.kind!r}")
        if self.n < 2:
            raise MaskError("n must be >= 2")
        for name in ("stride", "window"):
            v = getattr(self, name)
            if v is not None and not 1 <= v < self.n:
                raise MaskError(f"{name} must lie in [1, n), got {v}")
        if not 0 <= self.n_global <= self.n:
            raise MaskError("n_global out of range")
        if self.n_random < 0:
            raise MaskError("n_random must be >= 0")
        if not 0.0 <= self.drop_fraction <= 1.0:
            raise MaskError("drop_fraction must lie in [0, 1]")


# Defaults chosen so the n=128 masks land on the reference sparsity ratios.
DEFAULT_STRIDE = {"strided": 4, "fixed": 28}
DEFAULT_WINDOW = {"longformer": 5, "bigbird": 1}


def _star_bits(n: int) -> np.ndarray:
    bits = np.zeros((n, n), dtype=np.uint8)
    idx = np.arange(n)
    bits[idx, idx] = 1
    bits[idx, (idx + 1) % n] = 1
    bits[idx, (idx - 1) % n] = 1
    bits[0, :] = 1  # relay token
    bits[:, 0] = 1
    return bits


def _logsparse_bits(n: int) -> np.ndarray:
    bits = np.zeros((n, n), dtype=np.uint8)
    for i in range(n):
        bits[i, i] = 1
        k = 1
        while k <= i:
            bits[i, i - k] = 1
            k *= 2
    return bits


def _strided_bits(n: int, stride: int) -> np.ndarray:
    bits = np.zeros((n, n), dtype=np.uint8)
    for i in range(n):
        lo = max(0, i - stride + 1)
        bits[i, lo : i + 1] = 1  # self + previous stride-1 positions
        j = i - stride
        while j >= 0:  # every stride-th earlier position
            bits[i, j] = 1
            j -= stride
    return bits


def _fixed_bits(n: int, block: int) -> np.ndarray:
    bits = np.zeros((n, n), dtype=np.uint8)
    # Summary position of each block: its last index (clipped at n-1).
    summaries = [min((b + 1) * block - 1, n - 1) for b in range((n + block - 1) // block)]
    for i in range(n):
        b = i // block
        lo, hi = b * block, min((b + 1) * block, n)
        bits[i, lo:hi] = 1  # own block
        for s in summaries:
            bits[i, s] = 1
    return bits


def _longformer_bits(n: int, window: int, n_global: int, rng: Rng) -> np.ndarray:
    bits = np.zeros((n, n), dtype=np.uint8)
    for i in range(n):
        lo, hi = max(0, i - window), min(n, i + window + 1)
        bits[i, lo:hi] = 1
    for g in rng.choice_without_replacement(n, n_global):
        bits[g, :] = 1
        bits[:, g] = 1
    return bits


def _bigbird_bits(n: int, window: int, n_global: int, n_random: int, rng: Rng) -> np.ndarray:
    bits = np.zeros((n, n), dtype=np.uint8)
    for i in range(n):
        lo, hi = max(0, i - window), min(n, i + window + 1)
        bits[i, lo:hi] = 1
    # Global tokens alternate from the two sequence ends: 0, n-1, 1, n-2, ...
    for k in range(n_global):
        g = k // 2 if k % 2 == 0 else n - 1 - k // 2
        bits[g, :] = 1
        bits[:, g] = 1
    for i in range(n):
        for j in rng.choice_without_replacement(n, n_random):
            bits[i, j] = 1
            bits[j, i] = 1  # random links kept symmetric
    return bits


def generate_mask(spec: MaskSpec) -> AttentionMask:
    """Build the mask selected by ``spec``; deterministic per (spec, seed)."""
    n = spec.n
    rng = Rng(spec.seed)
    if spec.kind == "star":
        bits = _star_bits(n)
    elif spec.kind == "logsparse":
        bits = _logsparse_bits(n)
    elif spec.kind == "strided":
        bits = _strided_bits(n, spec.stride or DEFAULT_STRIDE["strided"])
    elif spec.kind == "fixed":
        bits = _fixed_bits(n, spec.stride or DEFAULT_STRIDE["fixed"])
    elif spec.kind == "longformer":
        bits = _longformer_bits(n, spec.window or DEFAULT_WINDOW["longformer"], spec.n_global, rng)
    elif spec.kind == "bigbird":
        bits = _bigbird_bits(
            n, spec.window or DEFAULT_WINDOW["bigbird"], spec.n_global, spec.n_random, rng
        )
    elif spec.kind == "full":
        bits = np.ones((n, n), dtype=np.uint8)
    elif spec.kind == "random":
        full = AttentionMask(np.ones((n, n), dtype=np.uint8))
        count = int(spec.drop_fraction * n * n)
        bits = random_drop(full, count, rng).bits.copy()
    else:  # pragma: no cover - guarded by MaskSpec
        raise MaskError(spec.kind)

    if spec.symmetrize:
        bits = bits | bits.T
    if not spec.keep_diag:
        bits = bits.copy()
        np.fill_diagonal(bits, 0)
    return AttentionMask(bits)


def sparsity(mask: AttentionMask) -> float:
    return mask.sparsity()


def drop_diagonal(mask: AttentionMask) -> AttentionMask:
    bits = mask.bits.copy()
    np.fill_diagonal(bits, 0)
    return AttentionMask(bits)


def random_drop(mask: AttentionMask, count: int, rng: Rng) -> AttentionMask:
    """Zero exactly ``count`` active entries, chosen uniformly without replacement."""
    active = np.flatnonzero(mask.bits)
    if count < 0 or count > active.size:
        raise MaskError(f"cannot drop {count} of {active.size} active entries")
    picked = active[rng.choice_without_replacement(active.size, count)]
    bits = mask.bits.copy().ravel()
    bits[picked] = 0
    return AttentionMask(bits.reshape(mask.bits.shape))


def render_ascii(mask: AttentionMask) -> str:
    """One text row per mask row; solid block = attend, dot = blocked."""
    return "".join("".join("█" if b else "·" for b in row) + "\n" for row in mask.bits)


def render_pgm(mask: AttentionMask) -> bytes:
    """Binary (P5) PGM image; 255 = attend, 0 = blocked."""
    header = f"P5\n{mask.n} {mask.n}\n255\n".encode("ascii")
    return header + (mask.bits * np.uint8(255)).tobytes()


def render_mask(mask: AttentionMask, fmt: str) -> bytes:
    if fmt == "ascii":
        return render_ascii(mask).encode("utf-8")
    if fmt == "pgm":
        return render_pgm(mask)
    raise MaskError(f"unknown render format {fmt!r}")


def mask_to_json(mask: AttentionMask, header: dict | None = None) -> str:
    doc = dict(header or {})
    doc["n"] = mask.n
    doc["rows"] = ["".join(str(int(b)) for b in row) for row in mask.bits]
    return json.dumps(doc, indent=1)


def mask_from_json(text: str) -> AttentionMask:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MaskError(f"malformed mask JSON: {exc}") from exc
    if not isinstance(doc, dict) or "n" not in doc or "rows" not in doc:
        raise MaskError("mask JSON must contain 'n' and 'rows'")
    n, rows = doc["n"], doc["rows"]
    if not isinstance(n, int) or len(rows) != n:
        raise MaskError(f"expected {n} rows, got {len(rows)}")
    bits = np.zeros((n, n), dtype=np.uint8)
    for i, row in enumerate(rows):
        if len(row) != n:
            raise MaskError(f"row {i} has length {len(row)}, expected {n}")
        if set(row) - {"0", "1"}:
            raise MaskError(f"row {i} contains non-binary characters")
        bits[i] = np.frombuffer(row.encode("ascii"), dtype=np.uint8) - ord("0")
    return AttentionMask(bits)


def save_mask(mask: AttentionMask, path, header: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(mask_to_json(mask, header))


def load_mask(path) -> AttentionMask:
    with open(path, "r", encoding="utf-8") as fh:
        return mask_from_json(fh.read())


def baseline_specs(n: int, seed: int = 0) -> dict[str, MaskSpec]:
    """The six classic patterns with this package's reference parameters."""
    return {
        "strided": MaskSpec("strided", n, stride=DEFAULT_STRIDE["strided"], seed=seed),
        "fixed": MaskSpec("fixed", n, stride=DEFAULT_STRIDE["fixed"], seed=seed),
        "longformer": MaskSpec(
            "longformer", n, window=DEFAULT_WINDOW["longformer"], n_global=2, seed=seed
        ),
        "logsparse": MaskSpec("logsparse", n, seed=seed),
        "bigbird": MaskSpec(
            "bigbird", n, window=DEFAULT_WINDOW["bigbird"], n_global=2, n_random=1, seed=seed
        ),
        "star": MaskSpec("star", n, seed=seed),
    }


# Reference sparsity ratios (percent) of the six patterns at n=128, with and
# without the diagonal.  The defaults above are tuned to land on these.
REFERENCE_SPARSITY_N128 = {
    "strided": (70.4, 71.2),
    "fixed": (72.7, 73.4),
    "longformer": (88.7, 89.5),
    "logsparse": (89.8, 90.6),
    "bigbird": (93.2, 93.9),
    "star": (96.1, 96.9),
}
