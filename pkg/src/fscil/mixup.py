"""Cross-class pair construction and mid-level feature blending.

Pairing aligns the batch against one random permutation of itself and
keeps only positions whose labels differ, so cost is linear in batch size
and every emitted pair crosses classes.  Each surviving pair draws its own
blend coefficient from Beta(alpha, alpha).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionMismatchError, InvalidParameterError
from .numerics import Rng, sample_beta


@dataclass(frozen=True)
class MixPair:
    index_i: int
    index_j: int
    lam: float


def pairs_from_permutation(labels: Sequence, sigma: Sequence[int],
                           lam_source: Callable[[], float]) -> list[MixPair]:
    """Deterministic core of pair construction.

    Walks positions in order; position i pairs with sigma(i) when their
    labels differ, drawing one coefficient per surviving pair.  Same-class
    alignments are dropped, not re-matched.
    """
    if len(sigma) != len(labels):
        raise DimensionMismatchError("permutation length does not match batch size")
    pairs = []
    for i, j in enumerate(sigma):
        if labels[i] != labels[int(j)]:
            pairs.append(MixPair(i, int(j), float(lam_source())))
    return pairs


def make_pairs(labels: Sequence, rng: Rng, alpha: float) -> list[MixPair]:
    """Sample one permutation and emit all cross-class alignments."""
    if not alpha > 0:
        raise InvalidParameterError(f"mix alpha must be positive, got {alpha!r}")
    sigma = rng.permutation(len(labels))
    return pairs_from_permutation(labels, sigma, lambda: sample_beta(alpha, rng))


def manifold_mix(mid_i, mid_j, lam: float) -> np.ndarray:
    """Convex combination lam*mid_i + (1-lam)*mid_j of mid-level features."""
    a = np.asarray(mid_i, dtype=np.float64)
    b = np.asarray(mid_j, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"mid features differ in shape: {a.shape} vs {b.shape}")
    if not 0.0 <= lam <= 1.0:
        raise InvalidParameterError(f"lambda {lam!r} outside [0, 1]")
    return lam * a + (1.0 - lam) * b
