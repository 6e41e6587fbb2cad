"""Session-stream construction, cumulative evaluation, and reported metrics.

A stream is one base split plus B few-shot sessions over disjoint classes.
Accuracy after session b is always measured on the union of the test sets
of sessions 0..b.  The drop from the base accuracy to the final accuracy
summarizes forgetting; base/new accuracies and their harmonic mean track
the balance between retained and freshly learned classes.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset
from .errors import (
    CoverageMismatchError,
    EmptyDatasetError,
    InsufficientClassesError,
    InsufficientShotsError,
    InvalidParameterError,
)
from .incremental import InferConfig, SessionState, infer_fact, infer_protonet
from .losses import LossConfig
from .numerics import Rng


@dataclass
class SessionSplit:
    train: LabeledDataset
    test: LabeledDataset
    classes: list[int]


@dataclass
class SessionStream:
    base_train: LabeledDataset
    base_test: LabeledDataset
    sessions: list[SessionSplit]
    base_classes: list[int]
    way: int
    shot: int

    @property
    def num_sessions(self) -> int:
        return len(self.sessions)

    def cumulative_test(self, b: int) -> LabeledDataset:
        """Union of the test sets of sessions 0..b."""
        if not 0 <= b <= self.num_sessions:
            raise InvalidParameterError(f"session index {b} outside [0, {self.num_sessions}]")
        feats = [self.base_test.features]
        labels = [self.base_test.labels]
        for split in self.sessions[:b]:
            feats.append(split.test.features)
            labels.append(split.test.labels)
        return LabeledDataset(np.concatenate(feats), np.concatenate(labels), "test")


def build_stream(train: LabeledDataset, test: LabeledDataset, num_base: int,
                 way: int, shot: int, num_sessions: int, seed: int,
                 shuffle_classes: bool = True) -> SessionStream:
    """Partition classes into one base split plus N-way K-shot sessions.

    Class-to-session assignment walks the class list in ascending order
    after an optional seeded shuffle of class identities; with the shuffle
    off the assignment is the plain arithmetic partition.  Few-shot train
    splits subsample exactly ``shot`` instances per class under the seed;
    test splits keep every test instance of their classes.
    """
    if num_base < 1 or way < 1 or shot < 1 or num_sessions < 0:
        raise InvalidParameterError("layout counts must be positive")
    classes = [int(c) for c in train.classes]
    needed = num_base + way * num_sessions
    if len(classes) < needed:
        raise InsufficientClassesError(
            f"need {needed} classes ({num_base} base + {way}x{num_sessions}), "
            f"dataset has {len(classes)}")
    if shuffle_classes:
        order = Rng(seed).derive("classes").permutation(len(classes))
        classes = [classes[i] for i in order]
    classes = classes[:needed]

    base_classes = classes[:num_base]
    base_train = train.restrict_to_classes(base_classes)
    base_test = test.restrict_to_classes(base_classes)
    if len(base_test) == 0:
        raise EmptyDatasetError("base test split is empty")

    sessions = []
    shot_rng = Rng(seed).derive("shots")
    for b in range(num_sessions):
        session_classes = classes[num_base + b * way: num_base + (b + 1) * way]
        feats, labels = [], []
        for c in session_classes:
            rows = np.nonzero(train.labels == c)[0]
            if rows.size < shot:
                raise InsufficientShotsError(
                    f"class {c} has {rows.size} train instances, need {shot}")
            pick = shot_rng.derive(b, c).choice_without_replacement(rows.size, shot)
            feats.append(train.features[rows[pick]])
            labels.append(np.full(shot, c, dtype=np.int64))
        session_train = LabeledDataset(np.concatenate(feats), np.concatenate(labels), "train")
        session_test = test.restrict_to_classes(session_classes)
        if len(session_test) == 0:
            raise EmptyDatasetError(f"session {b + 1} test split is empty")
        sessions.append(SessionSplit(session_train, session_test, list(session_classes)))
    return SessionStream(base_train, base_test, sessions, list(base_classes), way, shot)


def _predict_labels(state: SessionState, cfg: InferConfig, mode: str,
                    features: np.ndarray) -> np.ndarray:
    rows_to_labels = state.labels_by_row()
    preds = np.empty(features.shape[0], dtype=np.int64)
    for i in range(features.shape[0]):
        if mode == "fact":
            probs = infer_fact(state, cfg, features[i])
        elif mode == "protonet":
            probs = infer_protonet(state, features[i], cfg)
        else:
            raise InvalidParameterError(f"unknown inference mode {mode!r}")
        preds[i] = rows_to_labels[int(np.argmax(probs))]
    return preds


def evaluate_session(state: SessionState, stream: SessionStream, b: int,
                     cfg: InferConfig = InferConfig(), mode: str = "fact") -> float:
    """Top-1 accuracy on the cumulative test union of sessions 0..b."""
    test = stream.cumulative_test(b)
    missing = set(int(c) for c in test.classes) - set(state.registry)
    if missing:
        raise CoverageMismatchError(
            f"classifier lacks classes {sorted(missing)} present in the test union")
    preds = _predict_labels(state, cfg, mode, test.features)
    return float(np.mean(preds == test.labels))


def evaluate_base_new(state: SessionState, stream: SessionStream, b: int,
                      cfg: InferConfig = InferConfig(), mode: str = "fact"
                      ) -> tuple[float, float, float]:
    """(cumulative acc, base-class acc, new-class acc) after session b.

    The new-class accuracy covers every class introduced after the base
    session; it is 0 by convention when no new classes exist yet.
    """
    test = stream.cumulative_test(b)
    missing = set(int(c) for c in test.classes) - set(state.registry)
    if missing:
        raise CoverageMismatchError(
            f"classifier lacks classes {sorted(missing)} present in the test union")
    preds = _predict_labels(state, cfg, mode, test.features)
    hit = preds == test.labels
    is_base = np.isin(test.labels, np.asarray(stream.base_classes))
    acc = float(np.mean(hit))
    base_acc = float(np.mean(hit[is_base])) if is_base.any() else 0.0
    new_mask = ~is_base
    new_acc = float(np.mean(hit[new_mask])) if new_mask.any() else 0.0
    return acc, base_acc, new_acc


def performance_drop(accs) -> float:
    """First accuracy minus last accuracy of a session sequence."""
    seq = list(accs)
    if not seq:
        raise EmptyDatasetError("accuracy sequence is empty")
    return float(seq[0]) - float(seq[-1])


def harmonic_mean(a: float, b: float) -> float:
    """2ab/(a+b), continuously extended to 0 when both inputs are 0."""
    if a + b == 0:
        return 0.0
    return 2.0 * a * b / (a + b)


def assignment_matrix(state: SessionState, base_train: LabeledDataset,
                      cfg: LossConfig) -> np.ndarray:
    """Counts of virtual pseudo-label picks per base class.

    Row order follows the base-class head rows; column v counts how many
    of that class's training instances choose virtual prototype v.  Each
    instance contributes exactly one count, so row sums equal per-class
    instance counts.
    """
    head = state.head
    counts = np.zeros((cfg.num_base, cfg.num_virtual), dtype=np.int64)
    emb, _ = state.net.forward(base_train.features)
    logits, _ = head.logits(emb, use_scale=True)
    offset = head.num_known
    picks = np.argmax(logits[:, offset:], axis=1)
    for label, pick in zip(base_train.labels, picks):
        counts[state.registry[int(label)], pick] += 1
    return counts


@dataclass
class SessionMetrics:
    acc: list[float] = field(default_factory=list)
    base_acc: list[float] = field(default_factory=list)
    new_acc: list[float] = field(default_factory=list)
    hmean: list[float] = field(default_factory=list)
    pd: float = 0.0
    assignment: np.ndarray | None = None

    def record(self, acc: float, base: float, new: float) -> None:
        self.acc.append(acc)
        self.base_acc.append(base)
        self.new_acc.append(new)
        self.hmean.append(harmonic_mean(base, new))
        self.pd = performance_drop(self.acc)
