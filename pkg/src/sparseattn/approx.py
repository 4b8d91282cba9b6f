"""Exact verifier: self-attention that never reads a token's own position
still separates inputs (a contextual mapping), checked by enumeration.

Everything is computed in integers.  A grid point with coordinates in
{0, delta, ..., 1-delta} is stored scaled by 1/delta, so each entry is an
integer in [0, q-1] with q = 1/delta.  Writing Q = q^d:

- ``u = (1, q, ..., q^{d-1})`` makes ``row . u`` a base-q encoding, a
  bijection from rows onto [0, Q-1] (verified by enumeration on
  construction).
- A shift layer adds ``Q * (max_{j!=i} l_j - min_{j!=i} l_j)`` to the first
  coordinate of the unique token whose id sits inside the layer's threshold
  window; sweeping the window over all Q grid ids shifts every token exactly
  once, in increasing id order.
- Two global layers then add ``M * max_{j!=i} l_j`` with
  ``M = (Q-1)(Q^n + Q + 1)``, an exact upper bound (exclusive) for any
  post-sweep id, which spreads the per-input id sets into disjoint ranges.

Python integers make overflow impossible, so "exact or error" reduces to
the enumeration budget check.  The j != i exclusion is structural: the
max/min reductions are taken over the other tokens only, and an optional
cross-check rebuilds each shift as a literal hardmax attention row with a
blocked diagonal and asserts agreement.

Because the whole construction reads tokens only through their values, row
permutations of an input permute its output ids.  Cross-input separation is
therefore checked between inputs that are not permutations of one another;
within a permutation class the verifier instead asserts exact equivariance.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from itertools import permutations, product

import numpy as np

from .numerics import hardmax_rows

DEFAULT_ENUM_BUDGET = 10**6


class ApproxError(ValueError):
    """Invalid input to the exact construction."""


@dataclass(frozen=True)
class ShiftConfig:
    """Problem size (n tokens, d dims, grid 1/delta) plus derived constants."""

    n: int
    d: int
    inv_delta: int

    def __post_init__(self):
        if self.n <= 2:
            raise ApproxError("the construction needs n > 2")
        if self.d < 1 or self.inv_delta < 2:
            raise ApproxError("need d >= 1 and inv_delta >= 2")
        if self.big_q ** self.n - self.big_q ** (self.n - 1) - self.big_q ** 2 <= 0:
            raise ApproxError("grid too coarse: need Q^n > Q^(n-1) + Q^2")
        # u must encode rows bijectively onto [0, Q-1].
        if self.big_q <= DEFAULT_ENUM_BUDGET:
            ids = {self.row_id(row) for row in product(range(self.inv_delta), repeat=self.d)}
            if ids != set(range(self.big_q)):
                raise ApproxError("u is not a bijection on the grid rows")

    @property
    def big_q(self) -> int:
        return self.inv_delta ** self.d

    @property
    def u(self) -> tuple[int, ...]:
        return tuple(self.inv_delta ** k for k in range(self.d))

    @property
    def global_shift(self) -> int:
        """M = (Q-1)(Q^n + Q + 1); every post-sweep id lies in [0, M)."""
        q = self.big_q
        return (q - 1) * (q ** self.n + q + 1)

    @property
    def sentinel(self) -> int:
        """Scaled out-of-range code: -delta^{-nd} / delta."""
        return -(self.inv_delta ** (self.n * self.d + 1))

    def row_id(self, row) -> int:
        return sum(int(v) * uk for v, uk in zip(row, self.u))

    def delta_h(self) -> Fraction:
        """Unscaled id upper bound delta (Q-1)(Q^n + Q + 1)."""
        return Fraction(self.global_shift, self.inv_delta)


@dataclass(frozen=True)
class GridSequence:
    """n x d integer grid point, scaled by 1/delta; may contain sentinels."""

    cfg: ShiftConfig
    values: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if len(self.values) != self.cfg.n or any(len(r) != self.cfg.d for r in self.values):
            raise ApproxError(f"expected {self.cfg.n} x {self.cfg.d} values")
        for row in self.values:
            for v in row:
                if not (0 <= v < self.cfg.inv_delta or v == self.cfg.sentinel):
                    raise ApproxError(f"entry {v} is neither a grid coordinate nor the sentinel")

    def has_sentinel(self) -> bool:
        return any(v == self.cfg.sentinel for row in self.values for v in row)

    def distinct_rows(self) -> bool:
        return len(set(self.values)) == self.cfg.n


def quantize(t, cfg: ShiftConfig) -> Fraction:
    """Entrywise grid quantization: floor to the cell's lower corner within
    [0, 1), the sentinel -delta^{-nd} outside.

    Exact: ``t`` may be an int, float, or Fraction; floats convert to their
    exact binary rational value first.
    """
    t = Fraction(t)
    k = (t * cfg.inv_delta).__floor__()
    if 0 <= k <= cfg.inv_delta - 1:
        return Fraction(k, cfg.inv_delta)
    return Fraction(-(cfg.inv_delta ** (cfg.n * cfg.d)))


def quantize_sequence(x, cfg: ShiftConfig) -> GridSequence:
    """Apply :func:`quantize` entrywise and store scaled by 1/delta."""
    rows = []
    for row in x:
        vals = []
        for t in row:
            q = quantize(t, cfg) * cfg.inv_delta
            vals.append(int(q))
        rows.append(tuple(vals))
    if len(rows) != cfg.n:
        raise ApproxError(f"expected {cfg.n} rows, got {len(rows)}")
    return GridSequence(cfg, tuple(rows))


def _token_ids(values, cfg: ShiftConfig) -> list[int]:
    return [cfg.row_id(row) for row in values]


def psi_head(values, b: Fraction, cfg: ShiftConfig, via_attention: bool = False) -> list[int]:
    """Per-token shift value: max of the *other* ids above the threshold,
    min of the other ids below it.

    ``values`` is an n x d integer array (scaled).  Ids exactly on the
    threshold are rejected, as the two-branch rule does not cover them.
    With ``via_attention`` the same quantity is produced by an explicit
    hardmax attention row whose diagonal entry is removed.
    """
    n = len(values)
    if n < 2:
        raise ApproxError("psi needs n >= 2 so that j != i is non-empty")
    b = Fraction(b)
    ids = _token_ids(values, cfg)
    out = []
    for i, li in enumerate(ids):
        if li == b:
            raise ApproxError(f"token {i} id {li} hits the threshold exactly")
        others = ids[:i] + ids[i + 1 :]
        if via_attention:
            out.append(_psi_attention_row(ids, i, li - b))
        else:
            out.append(max(others) if li > b else min(others))
    return out


def _psi_attention_row(ids, i, coeff: Fraction) -> int:
    """One hardmax attention row with the diagonal blocked.

    Logits over the other tokens are ``coeff * l_j``; hardmax selects the
    argmax set (splitting ties equally) and the attended value is the
    weighted sum of ids, which for our inputs is always a single id.
    """
    logits = [(j, coeff * ids[j]) for j in range(len(ids)) if j != i]
    best = max(v for _, v in logits)
    chosen = [j for j, v in logits if v == best]
    total = sum(ids[j] for j in chosen)
    if total % len(chosen) != 0:  # pragma: no cover - ids distinct in practice
        raise ApproxError("tied hardmax attention does not average to an integer")
    return total // len(chosen)


def selective_shift(values, b1: Fraction, b2: Fraction, cfg: ShiftConfig,
                    via_attention: bool = False):
    """One shift layer: tokens with id strictly inside (b1, b2) get
    ``Q * (max_{j!=i} - min_{j!=i})`` added to their first coordinate."""
    if not b1 < b2:
        raise ApproxError("need b1 < b2")
    hi = psi_head(values, b1, cfg, via_attention)
    lo = psi_head(values, b2, cfg, via_attention)
    out = []
    for row, h, l in zip(values, hi, lo):
        shift = cfg.big_q * (h - l)
        out.append((row[0] + shift,) + tuple(row[1:]) if shift else tuple(row))
    return tuple(out)


def contextual_id(g: GridSequence, cfg: ShiftConfig, via_attention: bool = False):
    """Run the full stack on a distinct-row grid input.

    Returns ``(ids, trace)`` where ``ids`` are the n exact output ids and
    ``trace`` records each sweep phase (which token moved and the id vector
    after the move) plus both global shifts, for invariant checking.
    """
    if not g.distinct_rows():
        raise ApproxError("input has duplicate token rows")
    if g.has_sentinel():
        raise ApproxError("sentinel rows are outside the verified construction")
    values = g.values
    trace = {"phases": [], "after_first_global": None}
    half = Fraction(1, 2)
    for center in range(cfg.big_q):
        before = _token_ids(values, cfg)
        values = selective_shift(values, center - half, center + half, cfg, via_attention)
        after = _token_ids(values, cfg)
        moved = [i for i, (x, y) in enumerate(zip(before, after)) if x != y]
        if len(moved) > 1:
            raise ApproxError("more than one token moved in a single layer")
        if moved:
            trace["phases"].append({"token": moved[0], "ids": after})
    if len(trace["phases"]) != cfg.n:
        raise ApproxError(f"expected {cfg.n} shift phases, saw {len(trace['phases'])}")

    for stage in ("after_first_global", "after_second_global"):
        shifts = psi_head(values, Fraction(0), cfg, via_attention)
        values = tuple(
            (row[0] + cfg.global_shift * s,) + tuple(row[1:])
            for row, s in zip(values, shifts)
        )
        trace[stage] = _token_ids(values, cfg)
    return _token_ids(values, cfg), trace


def enumerate_inputs(cfg: ShiftConfig, budget: int = DEFAULT_ENUM_BUDGET):
    """All ordered distinct-row grid inputs (scaled)."""
    if cfg.big_q ** cfg.n > budget:
        raise ApproxError(
            f"enumeration of {cfg.big_q ** cfg.n} inputs exceeds budget {budget}"
        )
    rows = list(product(range(cfg.inv_delta), repeat=cfg.d))
    out = []

    def rec(prefix):
        if len(prefix) == cfg.n:
            out.append(GridSequence(cfg, tuple(prefix)))
            return
        for r in rows:
            if r not in prefix:
                rec(prefix + [r])

    rec([])
    return out


def verify_contextual_mapping(cfg: ShiftConfig, budget: int = DEFAULT_ENUM_BUDGET,
                              via_attention: bool = False) -> dict:
    """Exhaustively check the separation properties over every enumerated
    distinct-row input.

    Checked per input: all n output ids distinct; ids recover the post-sweep
    values modulo M; ids fall inside [M^2 l_n, M^2 (l_n + 1)); the phase
    ordering (unshifted ascending, then shifted ascending, shifted above
    unshifted) holds after every phase; adjacent post-sweep ids are at least
    one grid unit apart.  Across inputs: permutations of the same value set
    produce exactly permuted ids, value sets map injectively to the largest
    post-sweep id, and ids of non-permutation pairs never collide.

    Returns a report dict with zero ``collisions`` when all checks pass.
    """
    inputs = enumerate_inputs(cfg, budget)
    m = cfg.global_shift
    report = {
        "n": cfg.n, "d": cfg.d, "inv_delta": cfg.inv_delta,
        "inputs": len(inputs), "values": 0, "collisions": 0,
        "min_margin": None, "phases_checked": 0, "classes": 0,
    }
    by_class: dict[tuple, dict] = {}
    min_margin = None

    for g in inputs:
        ids, trace = contextual_id(g, cfg, via_attention)
        report["values"] += len(ids)
        if len(set(ids)) != cfg.n:
            report["collisions"] += 1

        start_ids = _token_ids(g.values, cfg)
        order = sorted(range(cfg.n), key=lambda i: start_ids[i])
        shifted: list[int] = []
        for phase_no, phase in enumerate(trace["phases"]):
            expect_token = order[phase_no]
            if phase["token"] != expect_token:
                report["collisions"] += 1
            snapshot = phase["ids"]
            shifted.append(expect_token)
            pending = order[phase_no + 1 :]
            seq = [snapshot[i] for i in pending] + [snapshot[i] for i in shifted]
            if any(a >= b for a, b in zip(seq, seq[1:])):
                report["collisions"] += 1
            report["phases_checked"] += 1
        post_sweep = trace["phases"][-1]["ids"]
        sorted_post = sorted(post_sweep)
        margin = min(b - a for a, b in zip(sorted_post, sorted_post[1:]))
        min_margin = margin if min_margin is None else min(min_margin, margin)
        if max(post_sweep) >= m:
            report["collisions"] += 1  # upper bound violated

        # first global shift flips the largest id below all others
        fg = trace["after_first_global"]
        fg_order = sorted(range(cfg.n), key=lambda i: post_sweep[i])
        largest = fg_order[-1]
        rest = [fg[i] for i in fg_order[:-1]]
        if not (fg[largest] < min(rest) and rest == sorted(rest)):
            report["collisions"] += 1

        l_sorted = tuple(sorted(start_ids))
        ln = sorted_post[-1]
        for i, out in enumerate(ids):
            if out % m != post_sweep[i]:
                report["collisions"] += 1
            if not (m * m * ln <= out < m * m * (ln + 1)):
                report["collisions"] += 1

        cls = by_class.setdefault(l_sorted, {"rep_ids_by_value": None, "ln": ln, "all_ids": set()})
        ids_by_value = tuple(ids[i] for i in order)  # keyed by ascending start value
        if cls["rep_ids_by_value"] is None:
            cls["rep_ids_by_value"] = ids_by_value
        elif cls["rep_ids_by_value"] != ids_by_value:
            report["collisions"] += 1  # permutation equivariance broken
        if cls["ln"] != ln:
            report["collisions"] += 1
        cls["all_ids"].update(ids)

    # cross-class separation: the union of id sets must have no repeats
    report["classes"] = len(by_class)
    all_ids: set[int] = set()
    total = 0
    lns = set()
    for cls in by_class.values():
        all_ids.update(cls["all_ids"])
        total += len(cls["all_ids"])
        lns.add(cls["ln"])
    if len(all_ids) != total:
        report["collisions"] += 1
    if len(lns) != len(by_class):
        report["collisions"] += 1  # value set -> largest id not injective
    report["min_margin"] = int(min_margin) if min_margin is not None else None
    return report


class ValueLookupError(ApproxError):
    """A contextual id was missing or inconsistently assigned."""


def approximate_function(f_table: dict, cfg: ShiftConfig, budget: int = DEFAULT_ENUM_BUDGET):
    """Compose quantize -> contextual ids -> token-wise value lookup.

    ``f_table`` maps each distinct-row grid cell (tuple of scaled rows) to an
    n x d output.  The returned callable reproduces the table exactly on
    every grid point.  Token outputs are looked up by contextual id, so the
    table must be permutation-consistent: permuting an input's rows must
    permute its output rows.  Inconsistent tables are rejected while the
    lookup is built; a missing id at evaluation time would mean the
    contextual mapping itself failed.
    """
    lookup: dict[int, tuple] = {}
    for g in enumerate_inputs(cfg, budget):
        key = g.values
        if key not in f_table:
            raise ValueLookupError(f"f_table is missing grid cell {key}")
        target = f_table[key]
        rows = tuple(tuple(r) for r in target)
        if len(rows) != cfg.n:
            raise ValueLookupError("table output must have one row per token")
        ids, _ = contextual_id(g, cfg)
        for i, out_row in zip(ids, rows):
            if i in lookup and lookup[i] != out_row:
                raise ValueLookupError(
                    "inconsistent outputs for one contextual id: "
                    "f_table is not permutation-consistent"
                )
            lookup[i] = out_row

    def g_fn(x):
        seq = quantize_sequence(x, cfg)
        if seq.has_sentinel():
            raise ApproxError("input leaves the approximation domain [0, 1)")
        if not seq.distinct_rows():
            raise ApproxError("input quantizes to duplicate rows")
        ids, _ = contextual_id(seq, cfg)
        out = []
        for i in ids:
            if i not in lookup:
                raise ValueLookupError(f"contextual id {i} not in lookup table")
            out.append(lookup[i])
        return tuple(out)

    return g_fn


def make_equivariant_table(cfg: ShiftConfig, value_fn) -> dict:
    """Build a permutation-consistent f_table from ``value_fn(sorted_cell)``.

    ``value_fn`` assigns an n x d output to each sorted representative; the
    outputs for permuted cells are the correspondingly permuted rows.
    """
    table = {}
    for g in enumerate_inputs(cfg):
        rows = g.values
        order = sorted(range(cfg.n), key=lambda i: rows[i])
        rep = tuple(rows[i] for i in order)
        rep_out = value_fn(rep)
        out = [None] * cfg.n
        for rank, i in enumerate(order):
            out[i] = tuple(rep_out[rank])
        table[rows] = tuple(out)
    return table


def cross_check_hardmax_rows(values, b: Fraction, cfg: ShiftConfig) -> bool:
    """Tie the integer construction back to the float hardmax kernel.

    Builds the literal (l_i - b) * l_j logit matrix with the diagonal masked
    to -inf-like values, runs :func:`numerics.hardmax_rows`, and compares the
    attended id per token with the exact branch rule.  Only valid while all
    quantities are small enough for exact float64 representation.
    """
    ids = _token_ids(values, cfg)
    n = len(ids)
    b = Fraction(b)
    if any(abs(i) > 2**40 for i in ids):
        raise ApproxError("ids too large for the float cross-check")
    logits = np.empty((n, n))
    floor = 0.0
    for i in range(n):
        for j in range(n):
            logits[i, j] = float((Fraction(ids[i]) - b) * ids[j])
    floor = logits.min() - 1.0
    for i in range(n):
        logits[i, i] = floor  # diagonal can never win the hardmax
    weights = hardmax_rows(logits)
    attended = weights @ np.asarray(ids, dtype=np.float64)
    exact = psi_head(values, b, cfg)
    return np.array_equal(attended, np.asarray(exact, dtype=np.float64))
