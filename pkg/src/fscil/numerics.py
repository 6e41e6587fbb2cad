"""Dense float64 kernels shared by every other module.

All public operations take and return plain 1-D numpy arrays; arithmetic
stays in 64-bit floats so the finite-difference oracles have headroom.
"""
from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .errors import (
    DimensionMismatchError,
    InvalidParameterError,
    NonFiniteError,
    ZeroNormError,
)

# Norms at or below this are treated as degenerate rather than perturbed.
NORM_EPS = 1e-12


def as_vector(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionMismatchError(f"expected a 1-D vector, got shape {v.shape}")
    return v


def l2_normalize(v) -> np.ndarray:
    """Scale ``v`` to unit Euclidean norm, preserving direction."""
    v = as_vector(v)
    n = float(np.sqrt(v @ v))
    if not n > NORM_EPS:
        raise ZeroNormError(f"vector norm {n!r} is at or below {NORM_EPS}")
    return v / n


def masked_softmax(logits, masked: int | None = None) -> np.ndarray:
    """Softmax with one index optionally excluded from the support.

    The masked entry is removed from the normalizing sum entirely (as if
    its logit were -inf), so its output probability is exactly 0 and the
    remaining entries sum to 1.  Exponentials are max-shifted over the
    surviving support for stability.
    """
    z = as_vector(logits)
    if not np.all(np.isfinite(z)):
        raise NonFiniteError("logits contain NaN or Inf")
    if masked is None:
        e = np.exp(z - z.max())
    else:
        m = int(masked)
        if not 0 <= m < z.size:
            raise IndexError(f"masked index {m} outside [0, {z.size})")
        if z.size == 1:
            raise InvalidParameterError("masking the only entry leaves no support")
        keep = np.ones(z.size, dtype=bool)
        keep[m] = False
        e = np.exp(z - z[keep].max())
        e[m] = 0.0
    return e / e.sum()


def _gamma_marsaglia_tsang(shape: float, rng: "Rng") -> float:
    # Squeeze-accept sampler for shape >= 1.
    d = shape - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    while True:
        x = float(rng.normal())
        v = (1.0 + c * x) ** 3
        if v <= 0.0:
            continue
        u = rng.uniform()
        if u < 1.0 - 0.0331 * x**4:
            return d * v
        log_u = math.log(u) if u > 0.0 else -math.inf
        if log_u < 0.5 * x * x + d * (1.0 - v + math.log(v)):
            return d * v


def _gamma(shape: float, rng: "Rng") -> float:
    if shape < 1.0:
        # Boost: Gamma(a) = Gamma(a+1) * U^(1/a).
        return _gamma_marsaglia_tsang(shape + 1.0, rng) * rng.uniform() ** (1.0 / shape)
    return _gamma_marsaglia_tsang(shape, rng)


def sample_beta(alpha: float, rng: "Rng") -> float:
    """One draw from Beta(alpha, alpha) via two seeded Gamma draws."""
    if not alpha > 0.0:
        raise InvalidParameterError(f"Beta shape must be positive, got {alpha!r}")
    while True:
        x = _gamma(alpha, rng)
        y = _gamma(alpha, rng)
        s = x + y
        if s > 0.0:
            return x / s


def finite_diff_grad(f: Callable[[np.ndarray], float], x, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function."""
    if not step > 0.0:
        raise InvalidParameterError(f"step must be positive, got {step!r}")
    x = np.array(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionMismatchError(f"expected a 1-D point, got shape {x.shape}")
    grad = np.empty_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + step
        f_plus = float(f(x))
        x[i] = orig - step
        f_minus = float(f(x))
        x[i] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise NonFiniteError(f"non-finite evaluation while probing coordinate {i}")
        grad[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


_MASK64 = 0xFFFFFFFFFFFFFFFF


def _mix64(*parts: int) -> int:
    # splitmix64-style avalanche folding every part into one 64-bit word.
    h = 0x9E3779B97F4A7C15
    for p in parts:
        h = (h ^ (p & _MASK64)) * 0xBF58476D1CE4E5B9 & _MASK64
        h ^= h >> 31
        h = h * 0x94D049BB133111EB & _MASK64
        h ^= h >> 29
    return h


def _salt_to_int(salt) -> int:
    if isinstance(salt, str):
        h = 0
        for b in salt.encode("utf-8"):
            h = (h * 131 + b) & _MASK64
        return h
    return int(salt)


class Rng:
    """Seeded random stream; identical seeds yield identical sequences.

    Substreams created with :meth:`derive` are independent and fully
    determined by the parent seed plus the salts, so callers can hand out
    reproducible streams per epoch / batch without coupling draw counts.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def derive(self, *salts) -> "Rng":
        return Rng(_mix64(self.seed, *(_salt_to_int(s) for s in salts)))

    def uniform(self) -> float:
        return float(self._gen.random())

    def uniform_array(self, low: float, high: float, size) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        return self._gen.choice(n, size=k, replace=False)

    def beta(self, alpha: float) -> float:
        return sample_beta(alpha, self)
