"""Numeric primitives shared by every stage of the pipeline.

All numerics are 64-bit floats on numpy arrays.  Natural log throughout, so
entropies are in nats.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_SYMBOLS = "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ"

# Tolerance for "this vector is a probability distribution".
DIST_SUM_TOL = 1e-9
# File loaders are more lenient (rows are renormalized after this check).
ROW_SUM_LOAD_TOL = 1e-6


@dataclass(frozen=True)
class Alphabet:
    """Ordered recognizable symbols.  The CTC blank is always the extra last
    class and is never part of ``symbols``.

    Args:
        symbols: unique, non-whitespace characters.  ``_`` is reserved for
            displaying the blank.
    """

    symbols: str

    def __post_init__(self) -> None:
        if not self.symbols:
            raise ValueError("alphabet needs at least one symbol")
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("alphabet symbols must be unique")
        for ch in self.symbols:
            if ch.isspace() or ch == "_":
                raise ValueError(f"symbol {ch!r} not allowed in alphabet")

    @classmethod
    def default(cls) -> "Alphabet":
        return cls(DEFAULT_SYMBOLS)

    @property
    def blank_index(self) -> int:
        return len(self.symbols)

    @property
    def num_classes(self) -> int:
        # recognizable symbols plus the blank
        return len(self.symbols) + 1

    def index_of(self, ch: str) -> int:
        idx = self.symbols.find(ch)
        if idx < 0:
            raise ValueError(f"symbol {ch!r} not in alphabet")
        return idx

    def symbol_of(self, index: int) -> str:
        """Class index back to a printable character; blank renders as '_'."""
        if index == self.blank_index:
            return "_"
        if 0 <= index < len(self.symbols):
            return self.symbols[index]
        raise ValueError(f"class index {index} out of range")

    def __contains__(self, ch: str) -> bool:
        return ch in self.symbols


def check_distribution(probs: np.ndarray) -> np.ndarray:
    """Validate a probability vector, returning it as a float64 array.

    Raises ValueError when any entry is outside [0, 1] or the sum is not 1
    within ``DIST_SUM_TOL``.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("distribution must be a non-empty 1-D vector")
    if not np.all(np.isfinite(p)):
        raise ValueError("distribution contains non-finite entries")
    if np.any(p < 0.0) or np.any(p > 1.0 + 1e-12):
        raise ValueError("distribution entries must lie in [0, 1]")
    total = float(p.sum())
    if abs(total - 1.0) > DIST_SUM_TOL:
        raise ValueError(f"distribution sums to {total!r}, not 1")
    return p


def _plogp(p: np.ndarray) -> np.ndarray:
    # p * log p with the 0 * log 0 = 0 convention
    safe = np.where(p > 0.0, p, 1.0)
    return np.where(p > 0.0, p * np.log(safe), 0.0)


def entropy(probs: np.ndarray) -> float:
    """Shannon entropy in nats of a single distribution.

    Zero for a one-hot vector, log(C) for the uniform vector over C classes.
    """
    p = check_distribution(probs)
    h = -float(_plogp(p).sum())
    # roundoff can leave a tiny negative residue on near-one-hot input
    return max(h, 0.0)


def row_entropies(probs: np.ndarray) -> np.ndarray:
    """Entropy of each row of an already-validated (T, C) matrix."""
    p = np.asarray(probs, dtype=np.float64)
    return np.maximum(-_plogp(p).sum(axis=-1), 0.0)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along ``axis``.

    Subtracting the per-slice max keeps exp() in range, so inputs like
    [1000, 0] neither overflow nor warn.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        raise ValueError("softmax of an empty vector")
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax input must be finite")
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def db_binarize(p, t, k: float = 50.0):
    """Differentiable soft threshold 1 / (1 + exp(-k * (p - t))).

    A steep sigmoid around the threshold map ``t``; approaches a hard step as
    ``k`` grows.  ``p`` and ``t`` must share a shape (both scalars or both
    arrays).
    """
    if k <= 0.0:
        raise ValueError("amplification factor k must be positive")
    pa = np.asarray(p, dtype=np.float64)
    ta = np.asarray(t, dtype=np.float64)
    if pa.shape != ta.shape:
        raise ValueError(f"shape mismatch: {pa.shape} vs {ta.shape}")
    z = k * (pa - ta)
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))
    if out.ndim == 0:
        return float(out)
    return out
