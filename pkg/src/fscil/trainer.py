"""Base-session training loop: SGD with momentum and cosine-annealed rate.

Each mini-batch contributes two loss families.  Real instances are pushed
toward their true class and, with the true class masked out, toward their
nearest virtual prototype.  The batch is then aligned against a random
permutation of itself, cross-class pairs are blended at the mid layer,
and the blends are pushed toward their own virtual and known pseudo
labels.  Gradients flow through the cosine head and both network stages
by the hand-written backward passes; mid-level gradients from blended
instances route back to both parents weighted by the blend coefficient.
"""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset
from .errors import (
    DimensionMismatchError,
    EmptyDatasetError,
    InvalidParameterError,
    NonFiniteError,
    SingleClassWarning,
)
from .losses import (
    LossBreakdown,
    LossConfig,
    ce_grad_rows,
    masked_softmax_rows,
    softmax_rows,
)
from .mixup import make_pairs
from .network import CosineHead, EmbeddingNet
from .numerics import Rng


@dataclass
class TrainConfig:
    loss: LossConfig
    epochs: int = 100
    batch_size: int = 64
    lr_init: float = 0.1
    momentum: float = 0.9
    seed: int = 0
    mix_alpha: float = 0.5
    forecast_enabled: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise InvalidParameterError("epochs must be nonnegative")
        if self.batch_size < 1:
            raise InvalidParameterError("batch size must be positive")
        if not self.lr_init > 0:
            raise InvalidParameterError("initial learning rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidParameterError("momentum must lie in [0, 1)")
        if not self.mix_alpha > 0:
            raise InvalidParameterError("mix alpha must be positive")


@dataclass
class EpochStats:
    """Per-epoch means; train_acc is measured on each batch before its update."""

    epoch: int
    lr: float
    l1: float
    l2: float
    l3: float
    l4: float
    total: float
    train_acc: float


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)
    final_train_acc: float = 0.0
    elapsed_seconds: float = 0.0


def lr_schedule(cfg: TrainConfig, epoch: int) -> float:
    """Cosine-annealed rate: lr_init * (1 + cos(pi * epoch / epochs)) / 2."""
    if not 0 <= epoch < cfg.epochs:
        raise InvalidParameterError(f"epoch {epoch} outside [0, {cfg.epochs})")
    return cfg.lr_init * 0.5 * (1.0 + np.cos(np.pi * epoch / cfg.epochs))


def sgd_step(params: list[np.ndarray], grads: list[np.ndarray],
             velocity: list[np.ndarray], lr: float, momentum: float):
    """Classical momentum update: v <- momentum*v + g; theta <- theta - lr*v."""
    if not (len(params) == len(grads) == len(velocity)):
        raise DimensionMismatchError("parameter, gradient, and velocity counts differ")
    for p, g, v in zip(params, grads, velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise DimensionMismatchError(
                f"shape mismatch in update: {p.shape} / {g.shape} / {v.shape}")
        v *= momentum
        v += g
        p -= lr * v
    return params, velocity


def _batch_grads_and_stats(net: EmbeddingNet, head: CosineHead, xb: np.ndarray,
                           yb: np.ndarray, cfg: TrainConfig, mix_rng: Rng):
    """One batch: losses, parameter gradients (same order as params), counters."""
    lcfg = cfg.loss
    n = xb.shape[0]
    mid, h_caches = net.forward_mid(xb)
    emb, g_caches = net.forward_from_mid(mid)
    logits, head_cache = head.logits(emb, use_scale=True)

    probs = softmax_rows(logits)
    rows = np.arange(n)
    l1_vec = -np.log(probs[rows, yb])
    offset = head.num_known
    y_hat = offset + np.argmax(logits[:, offset:], axis=1)
    masked = masked_softmax_rows(logits, yb)
    l2_vec = -np.log(masked[rows, y_hat])
    correct = int(np.sum(np.argmax(logits[:, :offset], axis=1) == yb))

    d_logits = (ce_grad_rows(probs, yb) + lcfg.gamma * ce_grad_rows(masked, y_hat)) / n
    d_emb, d_known, d_virtual = head.backward(d_logits, head_cache)
    d_mid, g_grads = net.backward_g(d_emb, g_caches)

    l3_sum = l4_sum = 0.0
    n_pairs = 0
    pairs = []
    if cfg.forecast_enabled:
        pairs = make_pairs(yb, mix_rng, cfg.mix_alpha)
    if pairs:
        n_pairs = len(pairs)
        idx_i = np.array([p.index_i for p in pairs])
        idx_j = np.array([p.index_j for p in pairs])
        lams = np.array([p.lam for p in pairs])
        mixed_mid = lams[:, None] * mid[idx_i] + (1.0 - lams)[:, None] * mid[idx_j]
        z, gz_caches = net.forward_from_mid(mixed_mid)
        logits_z, head_cache_z = head.logits(z, use_scale=True)
        probs_z = softmax_rows(logits_z)
        zrows = np.arange(n_pairs)
        yz_hat = offset + np.argmax(logits_z[:, offset:], axis=1)
        l3_all = -np.log(probs_z[zrows, yz_hat])
        masked_z = masked_softmax_rows(logits_z, yz_hat)
        yz_hathat = np.argmax(logits_z[:, :offset], axis=1)
        l4_all = -np.log(masked_z[zrows, yz_hathat])
        l3_sum = float(l3_all.sum())
        l4_sum = float(l4_all.sum())

        d_logits_z = (ce_grad_rows(probs_z, yz_hat)
                      + lcfg.gamma * ce_grad_rows(masked_z, yz_hathat)) / n_pairs
        d_z, dk2, dv2 = head.backward(d_logits_z, head_cache_z)
        d_known += dk2
        d_virtual += dv2
        d_mixed_mid, g_grads_z = net.backward_g(d_z, gz_caches)
        for (dw, db), (dwz, dbz) in zip(g_grads, g_grads_z):
            dw += dwz
            db += dbz
        np.add.at(d_mid, idx_i, lams[:, None] * d_mixed_mid)
        np.add.at(d_mid, idx_j, (1.0 - lams)[:, None] * d_mixed_mid)

    _, h_grads = net.backward_h(d_mid, h_caches)

    grads: list[np.ndarray] = []
    for dw, db in h_grads + g_grads:
        grads.append(dw)
        grads.append(db)
    grads.append(d_known)
    grads.append(d_virtual)

    sums = (float(l1_vec.sum()), float(l2_vec.sum()), l3_sum, l4_sum)
    return grads, sums, n_pairs, correct


def _full_train_accuracy(net: EmbeddingNet, head: CosineHead,
                         data: LabeledDataset) -> float:
    emb, _ = net.forward(data.features)
    logits, _ = head.logits(emb, use_scale=True)
    pred = np.argmax(logits[:, :head.num_known], axis=1)
    return float(np.mean(pred == data.labels))


def train_base(data: LabeledDataset, net: EmbeddingNet, head: CosineHead,
               cfg: TrainConfig) -> tuple[EmbeddingNet, CosineHead, TrainReport]:
    """Optimize the embedding and head on the base session.

    Mutates and returns the given net and head.  Runs are bitwise
    reproducible for a fixed seed: shuffling draws from one derived
    stream per epoch and pairing from one derived stream per batch, so
    disabling the blended terms does not disturb the shuffles.
    """
    if len(data) == 0:
        raise EmptyDatasetError("base session has no instances")
    if head.num_virtual < 1:
        raise InvalidParameterError("base training needs at least one virtual prototype")
    if data.num_classes < 2:
        warnings.warn("base session has a single class; no cross-class pairs exist "
                      "and the blended loss terms stay at zero", SingleClassWarning)

    start = time.perf_counter()
    report = TrainReport()
    if cfg.epochs == 0:
        report.final_train_acc = _full_train_accuracy(net, head, data)
        report.elapsed_seconds = time.perf_counter() - start
        return net, head, report

    root = Rng(cfg.seed)
    params = net.param_arrays() + head.param_arrays()
    velocity = [np.zeros_like(p) for p in params]
    n = len(data)

    for epoch in range(cfg.epochs):
        lr = lr_schedule(cfg, epoch)
        order = root.derive("shuffle", epoch).permutation(n)
        l_sums = np.zeros(4)
        seen = 0
        pair_count = 0
        correct = 0
        for batch_idx, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            mix_rng = root.derive("mixup", epoch, batch_idx)
            grads, sums, n_pairs, batch_correct = _batch_grads_and_stats(
                net, head, data.features[idx], data.labels[idx], cfg, mix_rng)
            if not all(np.isfinite(s) for s in sums):
                raise NonFiniteError(
                    f"loss went non-finite at epoch {epoch}, batch {batch_idx} "
                    f"(l1/l2/l3/l4 sums {sums}, lr {lr:.6g})")
            sgd_step(params, grads, velocity, lr, cfg.momentum)
            l_sums += np.array(sums)
            seen += idx.size
            pair_count += n_pairs
            correct += batch_correct
        mean = LossBreakdown(
            l1=l_sums[0] / seen,
            l2=l_sums[1] / seen,
            l3=l_sums[2] / pair_count if pair_count else 0.0,
            l4=l_sums[3] / pair_count if pair_count else 0.0,
            gamma=cfg.loss.gamma,
        )
        report.epochs.append(EpochStats(
            epoch=epoch, lr=float(lr), l1=mean.l1, l2=mean.l2, l3=mean.l3,
            l4=mean.l4, total=mean.total, train_acc=correct / seen))

    report.final_train_acc = _full_train_accuracy(net, head, data)
    report.elapsed_seconds = time.perf_counter() - start
    return net, head, report
