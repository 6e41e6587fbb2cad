"""Config-driven experiment orchestration shared by the CLI commands.

Everything here is deterministic in the run configuration's seed: dataset
generation, class-to-session assignment, parameter initialization, and
training each draw from independent derived streams, so a base-training
run and a later session run rebuild identical data from the same config.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import (
    Checkpoint,
    LabeledDataset,
    RunConfig,
    config_to_text,
    generate_gaussians,
    load_csv,
)
from .errors import InvalidParameterError, ParseError
from .incremental import (
    InferConfig,
    SessionState,
    class_prototypes,
    expand_head,
    finetune_session,
    kd_session,
)
from .losses import LossConfig
from .network import CosineHead, EmbeddingNet
from .numerics import Rng
from .protocol import (
    SessionMetrics,
    SessionStream,
    assignment_matrix,
    build_stream,
    evaluate_base_new,
)
from .trainer import TrainConfig, TrainReport, train_base

METHODS = ("fact", "protonet", "finetune", "kd")


def dataset_from_config(cfg: RunConfig) -> tuple[LabeledDataset, LabeledDataset]:
    if cfg.data_kind == "synthetic":
        return generate_gaussians(cfg.num_classes, cfg.dim, cfg.train_per_class,
                                  cfg.test_per_class, cfg.center_scale,
                                  cfg.noise_sigma, seed=cfg.seed)
    if cfg.data_kind == "csv":
        train = load_csv(cfg.train_path)
        test = load_csv(cfg.test_path)
        if train.label_names is None or test.label_names is None:
            raise ParseError("csv datasets must carry label names")
        index = {name: i for i, name in enumerate(train.label_names)}
        unseen = [n for n in test.label_names if n not in index]
        if unseen:
            raise ParseError(f"test classes {unseen} never appear in the train split")
        remapped = np.array([index[test.label_names[l]] for l in test.labels],
                            dtype=np.int64)
        test = LabeledDataset(test.features, remapped, "test", train.label_names)
        return train, test
    raise InvalidParameterError(f"unknown data kind {cfg.data_kind!r}")


def loss_config(cfg: RunConfig) -> LossConfig:
    return LossConfig(num_base=cfg.num_base, num_virtual=cfg.resolved_num_virtual(),
                      gamma=cfg.gamma)


def train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(loss=loss_config(cfg), epochs=cfg.epochs,
                       batch_size=cfg.batch_size, lr_init=cfg.lr_init,
                       momentum=cfg.momentum, seed=cfg.seed, mix_alpha=cfg.mix_alpha)


def infer_config(cfg: RunConfig) -> InferConfig:
    return InferConfig(eta=cfg.eta, prior=cfg.prior, tau=cfg.tau)


def stream_from_config(cfg: RunConfig, train: LabeledDataset,
                       test: LabeledDataset) -> SessionStream:
    return build_stream(train, test, cfg.num_base, cfg.way, cfg.shot, cfg.sessions,
                        seed=cfg.seed, shuffle_classes=cfg.shuffle_classes)


def _base_training_view(stream: SessionStream) -> LabeledDataset:
    """Base split with labels remapped to head rows 0..num_base-1."""
    row = {c: i for i, c in enumerate(stream.base_classes)}
    labels = np.array([row[int(c)] for c in stream.base_train.labels], dtype=np.int64)
    return LabeledDataset(stream.base_train.features, labels, "train")


@dataclass
class BaseRun:
    state: SessionState
    stream: SessionStream
    report: TrainReport


def run_base_training(cfg: RunConfig) -> BaseRun:
    """Build data and stream, train the base session, return the session-0 state."""
    train, test = dataset_from_config(cfg)
    stream = stream_from_config(cfg, train, test)
    net = EmbeddingNet.build(train.dim, cfg.mid_dim, cfg.embed_dim,
                             Rng(cfg.seed).derive("init-net"))
    head = CosineHead.init_random(cfg.num_base, cfg.resolved_num_virtual(),
                                  cfg.embed_dim, Rng(cfg.seed).derive("init-head"),
                                  scale=cfg.scale)
    net, head, report = train_base(_base_training_view(stream), net, head,
                                   train_config(cfg))
    from .incremental import initial_state

    state = initial_state(net, head, stream.base_classes)
    return BaseRun(state, stream, report)


def checkpoint_from_state(state: SessionState, cfg: RunConfig) -> Checkpoint:
    return Checkpoint(state.net, state.head, dict(state.registry),
                      config_text=config_to_text(cfg))


def state_from_checkpoint(cp: Checkpoint) -> SessionState:
    registry = {int(k): int(v) for k, v in cp.registry.items()}
    session_index = 0
    return SessionState(cp.net, cp.head, session_index, registry)


def run_sessions(state0: SessionState, stream: SessionStream, cfg: RunConfig,
                 method: str) -> tuple[SessionMetrics, SessionState]:
    """Walk sessions 1..B with the chosen method, evaluating after each.

    ``fact`` and ``protonet`` expand the head with class prototypes and
    differ only in the inference rule; ``finetune`` and ``kd`` additionally
    run their unfrozen SGD adaptation on the few-shot data.
    """
    if method not in METHODS:
        raise InvalidParameterError(f"unknown method {method!r}; pick one of {METHODS}")
    icfg = infer_config(cfg)
    mode = "fact" if method == "fact" else "protonet"
    metrics = SessionMetrics()
    metrics.assignment = assignment_matrix(state0, stream.base_train, loss_config(cfg))
    state = state0
    metrics.record(*evaluate_base_new(state, stream, 0, icfg, mode))
    for b, split in enumerate(stream.sessions, start=1):
        prototypes = class_prototypes(state.net, split.train)
        old_state = state
        state = expand_head(state, prototypes)
        if method == "finetune":
            state = finetune_session(state, split.train, cfg.finetune_steps,
                                     cfg.finetune_lr)
        elif method == "kd":
            state = kd_session(state, old_state, split.train, cfg.kd_steps,
                               cfg.kd_lr, cfg.kd_lambda)
        metrics.record(*evaluate_base_new(state, stream, b, icfg, mode))
    return metrics, state
