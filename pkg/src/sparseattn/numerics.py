"""Minimal dense numeric kernels shared by every other module.

Matrices are plain 2-D float64 numpy arrays (C order).  Randomness goes
through :class:`Rng`, a counter-based SplitMix64 generator, so every stream
is bit-reproducible from (seed, counter) on any platform -- numpy's own
generators are deliberately not used for anything that must replay.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# SplitMix64 constants (Steele, Lea, Flood 2014).
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)

_U53 = float(2**53)

# Uniform draws feeding log() are clamped away from {0, 1}.
UNIFORM_EPS = 1e-12


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class Rng:
    """Counter-based SplitMix64 stream.

    Output k of a stream is ``mix(seed + (k+1)*GAMMA)`` over uint64, so the
    full state is just (seed, counter) and any point of the stream can be
    reproduced or serialized exactly.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = int(counter)

    def __repr__(self):
        return f"Rng(seed={self.seed}, counter={self.counter})"

    @property
    def state(self) -> tuple[int, int]:
        return (self.seed, self.counter)

    @classmethod
    def from_state(cls, state) -> "Rng":
        seed, counter = state
        return cls(seed, counter)

    def spawn(self, key: int) -> "Rng":
        """Derive an independent stream; deterministic in (seed, key)."""
        with np.errstate(over="ignore"):
            child = _mix(np.uint64(self.seed) + (np.uint64(key) + np.uint64(1)) * _GAMMA)
        return Rng(int(child))

    def raw(self, k: int) -> np.ndarray:
        """Next k raw uint64 words."""
        idx = np.arange(self.counter + 1, self.counter + k + 1, dtype=np.uint64)
        self.counter += k
        with np.errstate(over="ignore"):
            return _mix(np.uint64(self.seed) + idx * _GAMMA)

    def uniforms(self, k: int) -> np.ndarray:
        """k doubles in [0, 1) with 53-bit resolution."""
        return (self.raw(k) >> np.uint64(11)).astype(np.float64) / _U53

    def uniform(self) -> float:
        # Pure-int fast path; bit-identical to uniforms(1)[0].
        self.counter += 1
        z = (self.seed + self.counter * 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
        z = z ^ (z >> 31)
        return (z >> 11) / _U53

    def uniform_array(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        size = int(np.prod(shape)) if shape else 1
        u = self.uniforms(size).reshape(shape)
        return low + (high - low) * u

    def randint(self, n: int) -> int:
        """Integer in [0, n) by rejection-free scaling (n << 2**53)."""
        return int(self.uniform() * n)

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from [0, n), order irrelevant but deterministic."""
        if not 0 <= k <= n:
            raise ValueError(f"cannot draw {k} from {n}")
        pool = np.arange(n)
        for i in range(k):  # partial Fisher-Yates
            j = i + self.randint(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k].copy()

    def shuffle(self, arr: np.ndarray) -> None:
        for i in range(len(arr) - 1, 0, -1):
            j = self.randint(i + 1)
            arr[i], arr[j] = arr[j], arr[i]


def _check_matrix(m: np.ndarray, name: str = "matrix") -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise ValueError(f"{name} must be a non-empty 2-D array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction.

    Safe for entries as large as +-1e4 (the soft-mask penalty scale): the
    shifted exponents never overflow, and fully-penalized entries underflow
    to an exact 0.
    """
    m = _check_matrix(m)
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def hardmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise hardmax: uniform distribution over each row's argmax set.

    Ties split equally so rows still sum to 1 exactly.
    """
    m = _check_matrix(m)
    is_max = m == m.max(axis=1, keepdims=True)
    return is_max / is_max.sum(axis=1, keepdims=True)


def sample_gumbel(rng: Rng) -> float:
    """One standard Gumbel draw, -log(-log(u)), u ~ U(0,1).

    u is clamped to [eps, 1-eps] since the formula diverges at both ends.
    """
    u = min(max(rng.uniform(), UNIFORM_EPS), 1.0 - UNIFORM_EPS)
    return -np.log(-np.log(u))


def sample_gumbel_array(rng: Rng, shape) -> np.ndarray:
    u = np.clip(rng.uniform_array(shape), UNIFORM_EPS, 1.0 - UNIFORM_EPS)
    return -np.log(-np.log(u))


class GradCheckError(AssertionError):
    """Raised when an analytic gradient disagrees with finite differences."""


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_coord: int
    analytic: float
    numeric: float

    def __str__(self):
        return (
            f"max rel error {self.max_rel_error:.3e} at coord {self.worst_coord} "
            f"(analytic {self.analytic:.6e}, central diff {self.numeric:.6e})"
        )


def gradcheck(f_and_grad, point: np.ndarray, step: float = 1e-5,
              tol: float | None = None, coords=None) -> GradCheckReport:
    """Compare an analytic gradient against central finite differences.

    ``f_and_grad(x)`` must return ``(value, gradient)`` for a flat float64
    vector ``x``.  The relative error at coordinate i is
    ``|analytic_i - numeric_i| / max(1, |analytic_i|, |numeric_i|)``.
    ``coords`` restricts the sweep to a subset of coordinates.  When ``tol``
    is given, exceeding it raises :class:`GradCheckError` naming the worst
    coordinate.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    point = np.asarray(point, dtype=np.float64).ravel()
    _, analytic = f_and_grad(point)
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    if analytic.shape != point.shape:
        raise ValueError("gradient shape does not match point shape")

    if coords is None:
        coords = range(point.size)
    worst = GradCheckReport(0.0, -1, 0.0, 0.0)
    for i in coords:
        x = point.copy()
        x[i] = point[i] + step
        up, _ = f_and_grad(x)
        x[i] = point[i] - step
        down, _ = f_and_grad(x)
        numeric = (up - down) / (2.0 * step)
        denom = max(1.0, abs(analytic[i]), abs(numeric))
        err = abs(analytic[i] - numeric) / denom
        if err > worst.max_rel_error:
            worst = GradCheckReport(err, int(i), float(analytic[i]), float(numeric))
    if tol is not None and worst.max_rel_error > tol:
        raise GradCheckError(f"gradient check failed: {worst} (tol {tol:g})")
    return worst
