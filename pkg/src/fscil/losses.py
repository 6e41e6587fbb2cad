"""The four training loss terms, pseudo-label selection, and gradient oracles.

Base-session training combines, per real instance, a cross-entropy pull
toward the true class (l1) with a masked cross-entropy that pushes the
instance toward its best-matching virtual prototype (l2), and, per mixed
instance, the symmetric pair (l3 pulls the blend toward its virtual
pseudo label, l4 toward its nearest known class with the virtual pseudo
label masked out).  The masked term always removes its target's
competitor from the softmax support entirely, so the excluded class
receives exactly zero probability and zero gradient.

``oracle_*_gradients`` evaluate the closed-form gradients that hold for
raw dot-product logits on unit-normalized inputs; they are independent of
the backward-pass implementation and exist to cross-check it.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import AssumptionViolatedError, DimensionMismatchError, InvalidParameterError
from .network import CosineHead
from .numerics import NORM_EPS, as_vector, masked_softmax


@dataclass(frozen=True)
class LossConfig:
    num_base: int
    num_virtual: int
    gamma: float = 0.01

    def __post_init__(self):
        if self.num_virtual < 1:
            raise InvalidParameterError("need at least one virtual prototype")
        if self.gamma < 0:
            raise InvalidParameterError(f"gamma must be nonnegative, got {self.gamma!r}")
        if self.num_base < 1:
            raise InvalidParameterError("need at least one known class")


@dataclass
class LossBreakdown:
    """Per-batch (or per-epoch mean) values of the four terms."""

    l1: float
    l2: float
    l3: float
    l4: float
    gamma: float

    @property
    def total(self) -> float:
        return self.l1 + self.gamma * self.l2 + self.l3 + self.gamma * self.l4


class VirtualLossResult(NamedTuple):
    value: float
    l1: float
    l2: float
    y_hat: int


class ForecastLossResult(NamedTuple):
    value: float
    l3: float
    l4: float
    y_hat: int
    y_hathat: int


def _check_block_layout(logits: np.ndarray, cfg: LossConfig) -> int:
    """Return the known-block size implied by the logit length."""
    offset = logits.size - cfg.num_virtual
    if offset < 1:
        raise DimensionMismatchError(
            f"{logits.size} logits cannot hold {cfg.num_virtual} virtual entries"
        )
    return offset


def pseudo_virtual_label(logits, cfg: LossConfig) -> int:
    """Index of the strongest virtual logit, offset into the full layout.

    Ties break toward the lowest index.
    """
    z = as_vector(logits)
    offset = _check_block_layout(z, cfg)
    return offset + int(np.argmax(z[offset:]))


def pseudo_known_label(logits, cfg: LossConfig) -> int:
    """Index of the strongest known-class logit (no offset)."""
    z = as_vector(logits)
    offset = _check_block_layout(z, cfg)
    return int(np.argmax(z[:offset]))


def virtual_loss(logits, y: int, cfg: LossConfig) -> VirtualLossResult:
    """l1 + gamma*l2 for one real instance with known label ``y``.

    l1 is plain cross-entropy over all logits; l2 masks out ``y`` and
    matches the remainder to the virtual pseudo label.
    """
    z = as_vector(logits)
    offset = _check_block_layout(z, cfg)
    if not 0 <= y < offset:
        raise InvalidParameterError(f"label {y} outside the known block [0, {offset})")
    y_hat = offset + int(np.argmax(z[offset:]))
    l1 = -float(np.log(masked_softmax(z)[y]))
    l2 = -float(np.log(masked_softmax(z, masked=y)[y_hat]))
    return VirtualLossResult(l1 + cfg.gamma * l2, l1, l2, y_hat)


def forecast_loss(logits_z, cfg: LossConfig) -> ForecastLossResult:
    """l3 + gamma*l4 for one mixed instance.

    Both pseudo labels are recomputed from the mixed instance's own
    logits: the virtual pseudo label from the virtual block, the known
    pseudo label from the known block.
    """
    z = as_vector(logits_z)
    offset = _check_block_layout(z, cfg)
    y_hat = offset + int(np.argmax(z[offset:]))
    y_hathat = int(np.argmax(z[:offset]))
    l3 = -float(np.log(masked_softmax(z)[y_hat]))
    l4 = -float(np.log(masked_softmax(z, masked=y_hat)[y_hathat]))
    return ForecastLossResult(l3 + cfg.gamma * l4, l3, l4, y_hat, y_hathat)


# ---------------------------------------------------------------------------
# Batched forms used by the trainer.  Rows are instances.
# ---------------------------------------------------------------------------

def softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def masked_softmax_rows(logits: np.ndarray, masked: np.ndarray) -> np.ndarray:
    """Row-wise softmax with one excluded column per row (probability 0 there)."""
    work = logits.copy()
    rows = np.arange(logits.shape[0])
    work[rows, masked] = -np.inf
    shifted = work - work.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def ce_grad_rows(probs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """d(-log p[target])/d logits for each row, given softmax probabilities."""
    grad = probs.copy()
    grad[np.arange(probs.shape[0]), targets] -= 1.0
    return grad


# ---------------------------------------------------------------------------
# Closed-form gradient oracles (raw dot-product logits, unit inputs, scale 1).
# ---------------------------------------------------------------------------

def _require_unit_rows(m: np.ndarray, what: str) -> None:
    norms = np.sqrt((m * m).sum(axis=-1))
    if np.any(np.abs(norms - 1.0) > 1e-9):
        raise AssumptionViolatedError(f"{what} must be unit-normalized")


def oracle_instance_gradients(head: CosineHead, emb, y: int, cfg: LossConfig) -> dict:
    """Closed-form gradients of l1 and l2 for one real instance.

    Assumes unit-normalized embedding and prototypes, raw dot-product
    logits, and no scale.  Returned gradients are d(loss)/d(input); keys:
    ``l1_demb``, ``l1_dproto``, ``l2_demb``, ``l2_dproto`` (full prototype
    stacks, known rows first), plus ``y_hat``.
    """
    e = as_vector(emb)
    proto = head.prototypes()
    _require_unit_rows(e, "embedding")
    _require_unit_rows(proto, "prototypes")
    logits = proto @ e
    a = masked_softmax(logits)
    y_hat = pseudo_virtual_label(logits, cfg)
    m = masked_softmax(logits, masked=y)

    l1_demb = a @ proto - proto[y]
    l1_dproto = np.outer(a, e)
    l1_dproto[y] -= e

    l2_demb = m @ proto - proto[y_hat]
    l2_dproto = np.outer(m, e)
    l2_dproto[y_hat] -= e

    return {
        "l1_demb": l1_demb,
        "l1_dproto": l1_dproto,
        "l2_demb": l2_demb,
        "l2_dproto": l2_dproto,
        "y_hat": y_hat,
        "probs": a,
        "masked_probs": m,
    }


def oracle_mixed_gradients(head: CosineHead, phi_i, phi_j, lam: float,
                           cfg: LossConfig) -> dict:
    """Closed-form gradients of l3 and l4 for one mixed instance.

    Under an identity second stage the blend z = lam*phi_i + (1-lam)*phi_j
    feeds the classifier directly, so gradients with respect to the parent
    embeddings are the z-gradient scaled by lam and (1 - lam).
    """
    pi = as_vector(phi_i)
    pj = as_vector(phi_j)
    if pi.shape != pj.shape:
        raise DimensionMismatchError("parent embeddings differ in dimension")
    if not 0.0 <= lam <= 1.0:
        raise InvalidParameterError(f"lambda {lam!r} outside [0, 1]")
    proto = head.prototypes()
    _require_unit_rows(pi, "embedding")
    _require_unit_rows(pj, "embedding")
    _require_unit_rows(proto, "prototypes")

    z = lam * pi + (1.0 - lam) * pj
    logits = proto @ z
    a = masked_softmax(logits)
    y_hat = pseudo_virtual_label(logits, cfg)
    y_hathat = pseudo_known_label(logits, cfg)
    m = masked_softmax(logits, masked=y_hat)

    l3_dz = a @ proto - proto[y_hat]
    l3_dproto = np.outer(a, z)
    l3_dproto[y_hat] -= z

    l4_dz = m @ proto - proto[y_hathat]
    l4_dproto = np.outer(m, z)
    l4_dproto[y_hathat] -= z

    return {
        "z": z,
        "l3_dz": l3_dz,
        "l3_dproto": l3_dproto,
        "l3_dphi_i": lam * l3_dz,
        "l3_dphi_j": (1.0 - lam) * l3_dz,
        "l4_dz": l4_dz,
        "l4_dproto": l4_dproto,
        "l4_dphi_i": lam * l4_dz,
        "l4_dphi_j": (1.0 - lam) * l4_dz,
        "y_hat": y_hat,
        "y_hathat": y_hathat,
    }


def unit_rows_ok(m: np.ndarray) -> bool:
    """True when every row is unit-normalized within the oracle tolerance."""
    norms = np.sqrt((np.asarray(m, dtype=np.float64) ** 2).sum(axis=-1))
    return bool(np.all(np.abs(norms - 1.0) <= 1e-9) and np.all(norms > NORM_EPS))
