"""Dual-oracle gradient audit for the four loss terms.

Two independent checks run on random instances.  First, the analytic
backward pass through the real head (normalized, scaled logits) must
match central finite differences of the scalar losses with respect to
the embedding (or both blend parents) and every prototype.  Second,
under the closed-form regime (raw dot-product logits, unit inputs, no
scale) the same backward pass must match the closed-form gradient
expressions to near machine precision.

Pseudo labels are frozen at their unperturbed values inside the probe
closures, and instances whose argmax margins are tighter than the probe
step are resampled, so every probe stays on one smooth branch.  Sampling
also rejects near-saturated softmax rows (judged from the forward pass
alone): once probabilities fall to roughly e^-14 the true gradients drop
below the noise floor of central differences in float64, where no step
size can certify a 1e-5 relative error.  The closed-form audit has no
such floor and runs on unconditioned instances.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .losses import (
    LossConfig,
    ce_grad_rows,
    masked_softmax_rows,
    oracle_instance_gradients,
    oracle_mixed_gradients,
    softmax_rows,
)
from .network import CosineHead
from .numerics import Rng, finite_diff_grad, l2_normalize, masked_softmax

_MARGIN = 1e-3   # reject instances whose pseudo-label argmax is this tight
_STEP = 1e-5

FD_TOLERANCE = 1e-5
CLOSED_TOLERANCE = 1e-9


def _rel_err(analytic: np.ndarray, reference: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    reference = np.asarray(reference, dtype=np.float64).ravel()
    denom = max(float(np.linalg.norm(reference)), 1e-12)
    return float(np.linalg.norm(analytic - reference)) / denom


def _margin_ok(logits: np.ndarray, lo: int, hi: int) -> bool:
    block = np.sort(logits[lo:hi])
    return block.size < 2 or (block[-1] - block[-2]) > _MARGIN


@dataclass
class Instance:
    head: CosineHead
    cfg: LossConfig
    emb: np.ndarray          # unit, for the real-instance terms
    phi_i: np.ndarray        # unit blend parents for the mixed terms
    phi_j: np.ndarray
    lam: float
    y: int


def _soft_enough(logits: np.ndarray, floor: float) -> bool:
    """Every softmax probability (and masked variant) clears the floor."""
    shifted = logits - logits.max()
    e = np.exp(shifted)
    if (e / e.sum()).min() < floor:
        return False
    # a masked denominator only shrinks, so probabilities only grow
    return True


def random_instance(rng: Rng, max_dim: int = 16, scale: float = 4.0,
                    probability_floor: float = 1e-3) -> Instance:
    """One random head/embedding setup with safely separated argmaxes.

    ``probability_floor`` rejects setups whose softmax rows saturate past
    the reach of the finite-difference oracle; pass 0 to disable.
    """
    while True:
        d = 2 + int(rng.uniform() * (max_dim - 1))
        n_known = 2 + int(rng.uniform() * 5)      # 2..6
        n_virtual = 1 + int(rng.uniform() * 4)    # 1..4
        proto = rng.normal((n_known + n_virtual, d))
        proto = proto / np.sqrt((proto * proto).sum(axis=1))[:, None]
        head = CosineHead(proto[:n_known], proto[n_known:], scale=scale,
                          num_base=n_known)
        cfg = LossConfig(num_base=n_known, num_virtual=n_virtual, gamma=0.01)
        emb = l2_normalize(rng.normal(d))
        phi_i = l2_normalize(rng.normal(d))
        phi_j = l2_normalize(rng.normal(d))
        lam = 0.05 + 0.9 * rng.uniform()
        y = int(rng.uniform() * n_known)
        z = lam * phi_i + (1.0 - lam) * phi_j
        logits_e = proto @ emb
        logits_z = proto @ z
        if not (_margin_ok(logits_e, n_known, n_known + n_virtual)
                and _margin_ok(logits_z, n_known, n_known + n_virtual)
                and _margin_ok(logits_z, 0, n_known)):
            continue
        if probability_floor > 0:
            cos_e, _ = head.logits(emb)
            cos_z, _ = head.logits(z)
            if not (_soft_enough(cos_e, probability_floor)
                    and _soft_enough(cos_z, probability_floor)):
                continue
        return Instance(head, cfg, emb, phi_i, phi_j, lam, y)


def _analytic_instance(inst: Instance, use_scale: bool, normalize: bool):
    """Backward-pass gradients of l1 and l2 for the real instance."""
    head = inst.head
    logits, cache = head.logits(inst.emb, use_scale=use_scale, normalize=normalize)
    probs = softmax_rows(logits[None, :])
    y_hat = head.num_known + int(np.argmax(logits[head.num_known:]))
    masked = masked_softmax_rows(logits[None, :], np.array([inst.y]))
    out = {}
    for term, d_rows in (("l1", ce_grad_rows(probs, np.array([inst.y]))),
                         ("l2", ce_grad_rows(masked, np.array([y_hat])))):
        d_emb, d_known, d_virtual = head.backward(d_rows, cache)
        out[term] = {"emb": d_emb, "proto": np.concatenate([d_known, d_virtual])}
    out["y_hat"] = y_hat
    return out


def _analytic_mixed(inst: Instance, use_scale: bool, normalize: bool):
    """Backward-pass gradients of l3 and l4 with an identity second stage."""
    head = inst.head
    z = inst.lam * inst.phi_i + (1.0 - inst.lam) * inst.phi_j
    logits, cache = head.logits(z, use_scale=use_scale, normalize=normalize)
    probs = softmax_rows(logits[None, :])
    y_hat = head.num_known + int(np.argmax(logits[head.num_known:]))
    y_hathat = int(np.argmax(logits[:head.num_known]))
    masked = masked_softmax_rows(logits[None, :], np.array([y_hat]))
    out = {}
    for term, d_rows in (("l3", ce_grad_rows(probs, np.array([y_hat]))),
                         ("l4", ce_grad_rows(masked, np.array([y_hathat])))):
        d_z, d_known, d_virtual = head.backward(d_rows, cache)
        out[term] = {
            "phi_i": inst.lam * d_z,
            "phi_j": (1.0 - inst.lam) * d_z,
            "proto": np.concatenate([d_known, d_virtual]),
        }
    out["y_hat"] = y_hat
    out["y_hathat"] = y_hathat
    return out


def _loss_of(proto: np.ndarray, emb: np.ndarray, head_template: CosineHead,
             target: int, masked_idx: int | None, use_scale: bool,
             normalize: bool) -> float:
    head = CosineHead(proto[:head_template.num_known], proto[head_template.num_known:],
                      scale=head_template.scale, num_base=head_template.num_base)
    logits, _ = head.logits(emb, use_scale=use_scale, normalize=normalize)
    return -float(np.log(masked_softmax(logits, masked=masked_idx)[target]))


def check_fd_instance(inst: Instance, use_scale: bool = True,
                      normalize: bool = True) -> dict[str, float]:
    """Max relative FD error per term for one instance (real + mixed)."""
    head = inst.head
    proto0 = head.prototypes()
    n_proto = proto0.shape[0]
    d = proto0.shape[1]
    errors: dict[str, float] = {}

    analytic = _analytic_instance(inst, use_scale, normalize)
    for term, masked_idx, target in (("l1", None, inst.y),
                                     ("l2", inst.y, analytic["y_hat"])):
        fd_emb = finite_diff_grad(
            lambda e: _loss_of(proto0, e, head, target, masked_idx, use_scale, normalize),
            inst.emb, step=_STEP)
        fd_proto = finite_diff_grad(
            lambda p: _loss_of(p.reshape(n_proto, d), inst.emb, head, target,
                               masked_idx, use_scale, normalize),
            proto0.ravel(), step=_STEP)
        errors[f"{term}_emb"] = _rel_err(analytic[term]["emb"], fd_emb)
        errors[f"{term}_proto"] = _rel_err(analytic[term]["proto"].ravel(), fd_proto)

    mixed = _analytic_mixed(inst, use_scale, normalize)
    lam = inst.lam

    def mixed_loss(phi_i, phi_j, proto, target, masked_idx):
        z = lam * phi_i + (1.0 - lam) * phi_j
        return _loss_of(proto, z, head, target, masked_idx, use_scale, normalize)

    for term, masked_idx, target in (("l3", None, mixed["y_hat"]),
                                     ("l4", mixed["y_hat"], mixed["y_hathat"])):
        fd_i = finite_diff_grad(
            lambda v: mixed_loss(v, inst.phi_j, proto0, target, masked_idx),
            inst.phi_i, step=_STEP)
        fd_j = finite_diff_grad(
            lambda v: mixed_loss(inst.phi_i, v, proto0, target, masked_idx),
            inst.phi_j, step=_STEP)
        fd_proto = finite_diff_grad(
            lambda p: mixed_loss(inst.phi_i, inst.phi_j, p.reshape(n_proto, d),
                                 target, masked_idx),
            proto0.ravel(), step=_STEP)
        errors[f"{term}_phi_i"] = _rel_err(mixed[term]["phi_i"], fd_i)
        errors[f"{term}_phi_j"] = _rel_err(mixed[term]["phi_j"], fd_j)
        errors[f"{term}_proto"] = _rel_err(mixed[term]["proto"].ravel(), fd_proto)
    return errors


def check_closed_instance(inst: Instance) -> dict[str, float]:
    """Backward pass vs closed forms under the raw unit-input regime."""
    analytic = _analytic_instance(inst, use_scale=False, normalize=False)
    oracle = oracle_instance_gradients(inst.head, inst.emb, inst.y, inst.cfg)
    errors = {
        "l1_emb": _rel_err(analytic["l1"]["emb"], oracle["l1_demb"]),
        "l1_proto": _rel_err(analytic["l1"]["proto"], oracle["l1_dproto"]),
        "l2_emb": _rel_err(analytic["l2"]["emb"], oracle["l2_demb"]),
        "l2_proto": _rel_err(analytic["l2"]["proto"], oracle["l2_dproto"]),
    }
    mixed = _analytic_mixed(inst, use_scale=False, normalize=False)
    m_oracle = oracle_mixed_gradients(inst.head, inst.phi_i, inst.phi_j, inst.lam,
                                      inst.cfg)
    errors.update({
        "l3_phi_i": _rel_err(mixed["l3"]["phi_i"], m_oracle["l3_dphi_i"]),
        "l3_phi_j": _rel_err(mixed["l3"]["phi_j"], m_oracle["l3_dphi_j"]),
        "l3_proto": _rel_err(mixed["l3"]["proto"], m_oracle["l3_dproto"]),
        "l4_phi_i": _rel_err(mixed["l4"]["phi_i"], m_oracle["l4_dphi_i"]),
        "l4_phi_j": _rel_err(mixed["l4"]["phi_j"], m_oracle["l4_dphi_j"]),
        "l4_proto": _rel_err(mixed["l4"]["proto"], m_oracle["l4_dproto"]),
    })
    return errors


@dataclass
class GradCheckResult:
    trials: int
    fd_max: dict[str, float] = field(default_factory=dict)
    closed_max: dict[str, float] = field(default_factory=dict)

    @property
    def fd_worst(self) -> float:
        return max(self.fd_max.values(), default=0.0)

    @property
    def closed_worst(self) -> float:
        return max(self.closed_max.values(), default=0.0)

    @property
    def ok(self) -> bool:
        return self.fd_worst <= FD_TOLERANCE and self.closed_worst <= CLOSED_TOLERANCE


def run_gradcheck(seed: int, trials: int, corrupt: bool = False) -> GradCheckResult:
    """Audit ``trials`` random instances; optionally inject a known fault.

    The ``corrupt`` hook perturbs one analytic gradient before comparison
    so harness failures are detectable (the result must then report not-ok).
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    rng = Rng(seed).derive("gradcheck")
    result = GradCheckResult(trials=trials)
    for t in range(trials):
        fd = check_fd_instance(random_instance(rng.derive("fd", t)))
        # the closed forms carry no finite-difference noise floor, so they
        # audit fully unconditioned instances
        closed = check_closed_instance(
            random_instance(rng.derive("closed", t), probability_floor=0.0))
        if corrupt and t == 0:
            fd["l1_emb"] += 1e-2
        for key, value in fd.items():
            result.fd_max[key] = max(result.fd_max.get(key, 0.0), value)
        for key, value in closed.items():
            result.closed_max[key] = max(result.closed_max.get(key, 0.0), value)
    return result
