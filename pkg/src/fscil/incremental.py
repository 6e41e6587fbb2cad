"""Session-time machinery: prototype extraction, head growth, inference.

After base training the embedding stays frozen.  Each incoming session
contributes one unit-normalized mean embedding per class, appended to the
known block.  Inference marginalizes the class posterior over the virtual
prototypes: each virtual prototype proposes a mixture score for every
known class, the rows are normalized, and the results are averaged under
the softmax weight of each virtual prototype given the query embedding.
With eta = 1 and the uniform prior mode this collapses to a plain softmax
over known-prototype similarities (the nearest-class-mean rule).

The classical baselines live here too: cross-entropy finetuning on the
few-shot data (the forgetting baseline) and finetuning with a knowledge
distillation term against the pre-session model.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import LabeledDataset
from .errors import (
    DimensionMismatchError,
    DuplicateLabelError,
    EmptyClassError,
    EmptyDatasetError,
    InvalidParameterError,
    NoVirtualPrototypesError,
)
from .losses import ce_grad_rows, softmax_rows
from .network import CosineHead, EmbeddingNet
from .numerics import l2_normalize, masked_softmax


@dataclass(frozen=True)
class InferConfig:
    eta: float = 0.5
    prior: str = "gaussian"      # "gaussian" keeps the prototype-similarity factor,
    tau: float = 1.0             # "uniform" drops it

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise InvalidParameterError(f"eta {self.eta!r} outside [0, 1]")
        if self.prior not in ("gaussian", "uniform"):
            raise InvalidParameterError(f"unknown prior mode {self.prior!r}")
        if not self.tau > 0:
            raise InvalidParameterError(f"tau must be positive, got {self.tau!r}")


@dataclass
class SessionState:
    net: EmbeddingNet
    head: CosineHead
    session_index: int
    registry: dict[int, int]            # global label -> head row

    def labels_by_row(self) -> np.ndarray:
        rows = np.empty(self.head.num_known, dtype=np.int64)
        for label, row in self.registry.items():
            rows[row] = label
        return rows

    def copy(self) -> "SessionState":
        return SessionState(self.net.copy(), self.head.copy(), self.session_index,
                            dict(self.registry))


def initial_state(net: EmbeddingNet, head: CosineHead,
                  base_classes) -> SessionState:
    """Session-0 state: base classes map to head rows in the given order."""
    labels = [int(c) for c in base_classes]
    if len(labels) != head.num_known:
        raise DimensionMismatchError(
            f"{len(labels)} base classes vs {head.num_known} known prototypes")
    return SessionState(net, head, 0, {label: i for i, label in enumerate(labels)})


def class_prototypes(net: EmbeddingNet, dataset: LabeledDataset,
                     classes=None) -> dict[int, np.ndarray]:
    """Unit-normalized mean embedding per class.

    Instances are summed in lexicographic feature order, so permuting the
    dataset's rows leaves every prototype bitwise unchanged.
    """
    if len(dataset) == 0:
        raise EmptyDatasetError("cannot extract prototypes from an empty dataset")
    wanted = dataset.classes if classes is None else np.asarray(classes, dtype=np.int64)
    out: dict[int, np.ndarray] = {}
    for c in wanted:
        rows = dataset.features[dataset.labels == c]
        if rows.shape[0] == 0:
            raise EmptyClassError(f"class {int(c)} has no instances")
        order = np.lexsort(rows.T[::-1])
        emb, _ = net.forward(rows[order])
        out[int(c)] = l2_normalize(emb.mean(axis=0))
    return out


def expand_head(state: SessionState, prototypes: dict[int, np.ndarray]) -> SessionState:
    """New state whose known block grows by the given class prototypes.

    The embedding is shared (frozen); the head arrays are copied.  New
    labels are appended in ascending order; the virtual block is untouched.
    """
    head = state.head
    if not prototypes:
        return SessionState(state.net, head.copy(), state.session_index + 1,
                            dict(state.registry))
    labels = sorted(int(c) for c in prototypes)
    for label in labels:
        if label in state.registry:
            raise DuplicateLabelError(f"label {label} is already registered")
    new_rows = np.stack([np.asarray(prototypes[c], dtype=np.float64) for c in labels])
    if new_rows.shape[1] != head.dim:
        raise DimensionMismatchError(
            f"prototype dim {new_rows.shape[1]} vs head dim {head.dim}")
    known = np.concatenate([head.known, new_rows], axis=0)
    registry = dict(state.registry)
    for i, label in enumerate(labels):
        registry[label] = head.num_known + i
    new_head = CosineHead(known, head.virtual.copy(), head.scale, head.num_base)
    return SessionState(state.net, new_head, state.session_index + 1, registry)


def _normalized_parts(state: SessionState, x):
    emb, _ = state.net.forward(np.asarray(x, dtype=np.float64))
    phi = l2_normalize(emb)
    w = state.head.known / np.sqrt((state.head.known ** 2).sum(axis=1))[:, None]
    return phi, w


def infer_protonet(state: SessionState, x, cfg: InferConfig = InferConfig()) -> np.ndarray:
    """Softmax over tau-scaled cosine similarity to the known prototypes."""
    phi, w = _normalized_parts(state, x)
    return masked_softmax(cfg.tau * (w @ phi))


def infer_fact(state: SessionState, cfg: InferConfig, x) -> np.ndarray:
    """Class posterior marginalized over the virtual prototypes.

    For each virtual prototype v, class i scores a mixture
    eta*exp(tau*w_i.(phi+p_v)) + (1-eta)*exp(tau*p_v.(phi+w_i)) in the
    gaussian prior mode; the uniform prior mode drops the prototype-
    similarity factor, leaving eta*exp(tau*w_i.phi) + (1-eta)*exp(tau*p_v.phi).
    Scores are normalized over classes per v and averaged under the
    softmax weights p(v | phi).  Exponents are max-shifted per v, which
    cancels in the normalization.
    """
    head = state.head
    if head.num_virtual < 1:
        raise NoVirtualPrototypesError("inference needs at least one virtual prototype")
    phi, w = _normalized_parts(state, x)
    p = head.virtual / np.sqrt((head.virtual ** 2).sum(axis=1))[:, None]
    tau = cfg.tau
    cw = w @ phi                      # (num_known,)
    cv = p @ phi                      # (num_virtual,)
    v_weights = masked_softmax(tau * cv)
    if cfg.prior == "gaussian":
        cross = w @ p.T               # (num_known, num_virtual)
        e_known = tau * (cw[:, None] + cross)
        e_virtual = tau * (cv[None, :] + cross)
    else:
        e_known = np.broadcast_to(tau * cw[:, None], (head.num_known, head.num_virtual))
        e_virtual = np.broadcast_to(tau * cv[None, :], (head.num_known, head.num_virtual))
    shift = np.maximum(e_known.max(axis=0), e_virtual.max(axis=0))
    scores = cfg.eta * np.exp(e_known - shift) + (1.0 - cfg.eta) * np.exp(e_virtual - shift)
    scores = scores / scores.sum(axis=0)
    return scores @ v_weights


def kd_loss(old_logits, new_logits, y: int, lambda_kd: float) -> float:
    """(1-lambda)*CE + lambda*KD between old and new class distributions.

    The distillation term is the cross-entropy of the new model's
    distribution over the old classes under the old model's distribution.
    """
    if not 0.0 <= lambda_kd <= 1.0:
        raise InvalidParameterError(f"lambda_kd {lambda_kd!r} outside [0, 1]")
    old = np.asarray(old_logits, dtype=np.float64)
    new = np.asarray(new_logits, dtype=np.float64)
    if old.size > new.size:
        raise DimensionMismatchError(
            f"old model covers {old.size} classes but new model only {new.size}")
    if not 0 <= y < new.size:
        raise InvalidParameterError(f"label {y} outside the new output range")
    ce = -math.log(masked_softmax(new)[y])
    s_old = masked_softmax(old)
    s_new = masked_softmax(new[:old.size])
    kd = -float(s_old @ np.log(s_new))
    return (1.0 - lambda_kd) * ce + lambda_kd * kd


def _adapt_with_sgd(state: SessionState, dataset: LabeledDataset, steps: int,
                    lr: float, d_logits_fn) -> SessionState:
    """Shared unfrozen full-batch SGD loop for the finetune and KD baselines.

    ``d_logits_fn(known_logits, labels)`` returns the per-row gradient on
    the known-block logits; virtual prototypes receive zero gradient and
    stay fixed.
    """
    if len(dataset) == 0:
        raise EmptyDatasetError("session dataset is empty")
    if steps == 0:
        return state
    new_state = state.copy()
    net, head = new_state.net, new_state.head
    params = net.param_arrays() + head.param_arrays()
    xb = dataset.features
    yb = np.array([new_state.registry[int(c)] for c in dataset.labels])
    for _ in range(steps):
        mid, h_caches = net.forward_mid(xb)
        emb, g_caches = net.forward_from_mid(mid)
        logits, head_cache = head.logits(emb, use_scale=True)
        d_known_logits = d_logits_fn(logits[:, :head.num_known], yb) / len(dataset)
        d_logits = np.concatenate(
            [d_known_logits, np.zeros((xb.shape[0], head.num_virtual))], axis=1)
        d_emb, d_k, d_v = head.backward(d_logits, head_cache)
        d_mid, g_grads = net.backward_g(d_emb, g_caches)
        _, h_grads = net.backward_h(d_mid, h_caches)
        grads: list[np.ndarray] = []
        for dw, db in h_grads + g_grads:
            grads.append(dw)
            grads.append(db)
        grads.append(d_k)
        grads.append(d_v)
        for param, grad in zip(params, grads):
            param -= lr * grad
    return new_state


def finetune_session(state: SessionState, dataset: LabeledDataset, steps: int,
                     lr: float) -> SessionState:
    """Plain cross-entropy SGD on only the few-shot data, everything unfrozen.

    The catastrophic-forgetting baseline: no virtual terms, no blending,
    no distillation.  Expects a state whose head already covers the
    session's classes.
    """
    def d_logits(known_logits, yb):
        return ce_grad_rows(softmax_rows(known_logits), yb)

    return _adapt_with_sgd(state, dataset, steps, lr, d_logits)


def kd_session(state: SessionState, old_state: SessionState, dataset: LabeledDataset,
               steps: int, lr: float, lambda_kd: float) -> SessionState:
    """Few-shot SGD on (1-lambda)*CE + lambda*KD against the pre-session model."""
    if not 0.0 <= lambda_kd <= 1.0:
        raise InvalidParameterError(f"lambda_kd {lambda_kd!r} outside [0, 1]")
    n_old = old_state.head.num_known
    old_emb, _ = old_state.net.forward(dataset.features)
    old_logits, _ = old_state.head.logits(old_emb, use_scale=True)
    s_old = softmax_rows(old_logits[:, :n_old])

    def d_logits(known_logits, yb):
        ce = ce_grad_rows(softmax_rows(known_logits), yb)
        s_new = softmax_rows(known_logits[:, :n_old])
        kd = np.zeros_like(known_logits)
        kd[:, :n_old] = s_new - s_old
        return (1.0 - lambda_kd) * ce + lambda_kd * kd

    return _adapt_with_sgd(state, dataset, steps, lr, d_logits)
