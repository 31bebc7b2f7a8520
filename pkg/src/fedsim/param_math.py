"""Flat parameter-vector algebra shared by server and clients."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class UsageError(ValueError):
    """Raised when an operation is called with inputs violating its contract."""


@dataclass(frozen=True)
class SparseUpdate:
    """Top-fraction slice of a dense model delta.

    ``indices`` are strictly increasing positions into a vector of length
    ``size``; ``values`` are the unmodified deltas at those positions.
    """

    indices: np.ndarray
    values: np.ndarray
    size: int
    round: int = 1

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        val = np.asarray(self.values, dtype=np.float64)
        if idx.ndim != 1 or idx.shape != val.shape:
            raise UsageError("indices and values must be 1-d arrays of equal length")
        if idx.size and (idx[0] < 0 or idx[-1] >= self.size or np.any(np.diff(idx) <= 0)):
            raise UsageError("indices must be strictly increasing and within [0, size)")
        if not np.all(np.isfinite(val)):
            raise UsageError("sparse update contains non-finite values")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)

    def __len__(self):
        return int(self.indices.size)

    def __eq__(self, other):
        if not isinstance(other, SparseUpdate):
            return NotImplemented
        return (
            self.size == other.size
            and self.round == other.round
            and np.array_equal(self.indices, other.indices)
            and self.values.tobytes() == other.values.tobytes()
        )

    def densify(self) -> np.ndarray:
        out = np.zeros(self.size, dtype=np.float64)
        out[self.indices] = self.values
        return out


def retained_count(size: int, fraction: float) -> int:
    """``ceil(fraction * size)``, robust to binary rounding of ``fraction``."""
    return min(size, math.ceil(round(fraction * size, 9)))


def top_fraction_mask(delta, fraction: float = 0.25, round: int = 1) -> SparseUpdate:
    """Keep the ``ceil(fraction * P)`` entries of largest magnitude.

    Ties at the cutoff go to the lower index.
    """
    delta = np.asarray(delta, dtype=np.float64)
    if delta.ndim != 1 or delta.size == 0:
        raise UsageError("delta must be a non-empty 1-d vector")
    if not 0.0 < fraction <= 1.0:
        raise UsageError(f"fraction must lie in (0, 1], got {fraction}")
    if not np.all(np.isfinite(delta)):
        raise UsageError("delta contains non-finite values")
    m = retained_count(delta.size, fraction)
    order = np.argsort(-np.abs(delta), kind="stable")
    keep = np.sort(order[:m])
    return SparseUpdate(keep, delta[keep].copy(), int(delta.size), round)


def weighted_sum(updates, weights) -> np.ndarray:
    """Dense ``sum_k weights[k] * updates[k]``; unshared coordinates count as 0."""
    updates = list(updates)
    weights = [float(w) for w in weights]
    if not updates:
        raise UsageError("at least one update is required")
    if len(updates) != len(weights):
        raise UsageError(f"{len(updates)} updates but {len(weights)} weights")
    if not all(math.isfinite(w) and w >= 0 for w in weights):
        raise UsageError(f"weights must be finite and non-negative: {weights}")
    size = updates[0].size
    if any(u.size != size for u in updates):
        raise UsageError("updates disagree on parameter count")
    out = np.zeros(size, dtype=np.float64)
    for u, w in zip(updates, weights):
        out[u.indices] += w * u.values
    return out


def sq_distance(a, b) -> float:
    """Squared Euclidean distance between two parameter vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise UsageError(f"length mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return float(d @ d)
