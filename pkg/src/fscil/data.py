"""Datasets, run configuration, and model persistence.

Covers the synthetic Gaussian-cluster generator, CSV ingestion (first
column label, remaining columns features, optional header), the flat
key=value run-configuration format, and a checksummed binary checkpoint
format that round-trips every 64-bit parameter exactly.
"""
from __future__ import annotations

import dataclasses
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import (
    ChecksumMismatchError,
    CheckpointError,
    InvalidParameterError,
    ParseError,
    RaggedRowsError,
    VersionMismatchError,
)
from .network import AffineLayer, CosineHead, EmbeddingNet
from .numerics import Rng


@dataclass
class LabeledDataset:
    features: np.ndarray            # (n, dim) float64
    labels: np.ndarray              # (n,) int64 dense class ids
    split: str = "train"
    label_names: list[str] | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise InvalidParameterError(f"features must be 2-D, got {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise InvalidParameterError("feature and label counts differ")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    @property
    def num_classes(self) -> int:
        return self.classes.size

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices)
        return LabeledDataset(self.features[idx], self.labels[idx], self.split,
                             self.label_names)

    def restrict_to_classes(self, classes) -> "LabeledDataset":
        mask = np.isin(self.labels, np.asarray(classes))
        return LabeledDataset(self.features[mask], self.labels[mask], self.split,
                             self.label_names)


def generate_gaussians(num_classes: int, dim: int, train_per_class: int,
                       test_per_class: int, center_scale: float,
                       noise_sigma: float, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Isotropic Gaussian clusters around centers scattered on a sphere."""
    if num_classes < 1 or train_per_class < 1 or test_per_class < 1:
        raise InvalidParameterError("counts must be at least 1")
    if noise_sigma < 0:
        raise InvalidParameterError(f"noise sigma must be nonnegative, got {noise_sigma!r}")
    rng = Rng(seed).derive("gaussians")
    raw = rng.normal((num_classes, dim))
    centers = center_scale * raw / np.sqrt((raw * raw).sum(axis=1))[:, None]

    def draw(per_class: int, stream: Rng, split: str) -> LabeledDataset:
        feats = np.repeat(centers, per_class, axis=0)
        feats = feats + noise_sigma * stream.normal((num_classes * per_class, dim))
        labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
        return LabeledDataset(feats, labels, split)

    return (draw(train_per_class, rng.derive("train"), "train"),
            draw(test_per_class, rng.derive("test"), "test"))


def _is_number(token: str) -> bool:
    try:
        float(token)
        return True
    except ValueError:
        return False


def load_csv(path) -> LabeledDataset:
    """Parse a labeled dataset: label column first, then decimal features.

    A header row is detected by a non-numeric second field and skipped.
    Labels are kept verbatim as strings and mapped to dense indices in
    first-appearance order.
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    rows: list[tuple[str, list[float]]] = []
    width = None
    start = 0
    data_lines = [(i + 1, ln) for i, ln in enumerate(lines) if ln.strip()]
    if not data_lines:
        raise ParseError("file holds no rows")
    first_no, first = data_lines[0]
    first_cells = [c.strip() for c in first.split(",")]
    if len(first_cells) >= 2 and not _is_number(first_cells[1]):
        start = 1  # header row
    for line_no, line in data_lines[start:]:
        cells = [c.strip() for c in line.split(",")]
        if len(cells) < 2:
            raise ParseError("row needs a label and at least one feature", line=line_no)
        if width is None:
            width = len(cells)
        elif len(cells) != width:
            raise RaggedRowsError(
                f"expected {width} columns, found {len(cells)}", line=line_no)
        try:
            values = [float(c) for c in cells[1:]]
        except ValueError as exc:
            raise ParseError(str(exc), line=line_no) from None
        rows.append((cells[0], values))
    if not rows:
        raise ParseError("file holds no data rows")
    names: list[str] = []
    index: dict[str, int] = {}
    labels = np.empty(len(rows), dtype=np.int64)
    for k, (name, _) in enumerate(rows):
        if name not in index:
            index[name] = len(names)
            names.append(name)
        labels[k] = index[name]
    features = np.array([vals for _, vals in rows], dtype=np.float64)
    return LabeledDataset(features, labels, "train", label_names=names)


# ---------------------------------------------------------------------------
# Run configuration: flat key=value text with section prefixes.
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    seed: int = 0
    # data.*
    data_kind: str = "synthetic"
    num_classes: int = 10
    dim: int = 16
    train_per_class: int = 25
    test_per_class: int = 25
    center_scale: float = 1.0
    noise_sigma: float = 0.3
    train_path: str = ""
    test_path: str = ""
    # train.*
    epochs: int = 100
    batch_size: int = 64
    lr_init: float = 0.1
    momentum: float = 0.9
    mix_alpha: float = 0.5
    # Desk-scale training wants a soft logit scale: at 16 the softmax
    # saturates early, one virtual prototype captures every assignment,
    # and the marginalized inference inherits a lopsided geometry.
    scale: float = 4.0
    mid_dim: int = 32
    embed_dim: int = 16
    # loss.*
    gamma: float = 0.01
    num_virtual: int = 0        # 0 means "way * sessions"
    # infer.*
    eta: float = 0.5
    prior: str = "gaussian"
    tau: float = 1.0
    # protocol.*
    num_base: int = 6
    way: int = 2
    shot: int = 5
    sessions: int = 2
    shuffle_classes: bool = True
    # method.*
    finetune_steps: int = 100
    finetune_lr: float = 0.05
    kd_steps: int = 100
    kd_lr: float = 0.05
    kd_lambda: float = 0.5

    def resolved_num_virtual(self) -> int:
        return self.num_virtual if self.num_virtual > 0 else self.way * self.sessions


_KEYMAP = {
    "seed": ("seed", int),
    "data.kind": ("data_kind", str),
    "data.num_classes": ("num_classes", int),
    "data.dim": ("dim", int),
    "data.train_per_class": ("train_per_class", int),
    "data.test_per_class": ("test_per_class", int),
    "data.center_scale": ("center_scale", float),
    "data.noise_sigma": ("noise_sigma", float),
    "data.train_path": ("train_path", str),
    "data.test_path": ("test_path", str),
    "train.epochs": ("epochs", int),
    "train.batch_size": ("batch_size", int),
    "train.lr_init": ("lr_init", float),
    "train.momentum": ("momentum", float),
    "train.mix_alpha": ("mix_alpha", float),
    "train.scale": ("scale", float),
    "train.mid_dim": ("mid_dim", int),
    "train.embed_dim": ("embed_dim", int),
    "loss.gamma": ("gamma", float),
    "loss.num_virtual": ("num_virtual", int),
    "infer.eta": ("eta", float),
    "infer.prior": ("prior", str),
    "infer.tau": ("tau", float),
    "protocol.num_base": ("num_base", int),
    "protocol.way": ("way", int),
    "protocol.shot": ("shot", int),
    "protocol.sessions": ("sessions", int),
    "protocol.shuffle_classes": ("shuffle_classes", bool),
    "method.finetune_steps": ("finetune_steps", int),
    "method.finetune_lr": ("finetune_lr", float),
    "method.kd_steps": ("kd_steps", int),
    "method.kd_lr": ("kd_lr", float),
    "method.kd_lambda": ("kd_lambda", float),
}

_FIELD_TO_KEY = {f: k for k, (f, _) in _KEYMAP.items()}


def _coerce(value: str, typ, key: str, line_no: int):
    if typ is bool:
        low = value.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ParseError(f"cannot read {value!r} as a flag for {key}", line=line_no)
    try:
        return typ(value)
    except ValueError:
        raise ParseError(f"cannot read {value!r} as {typ.__name__} for {key}",
                         line=line_no) from None


def parse_config_text(text: str) -> RunConfig:
    cfg = RunConfig()
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected key = value, got {raw!r}", line=line_no)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _KEYMAP:
            raise ParseError(f"unknown configuration key {key!r}", line=line_no)
        attr, typ = _KEYMAP[key]
        setattr(cfg, attr, _coerce(value, typ, key, line_no))
    return cfg


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def config_to_text(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        key = _FIELD_TO_KEY[f.name]
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Checkpoints: magic, version, shape header, length-prefixed little-endian
# float64 arrays, trailing CRC32 over everything before it.
# ---------------------------------------------------------------------------

_MAGIC = b"FSCILCKP"
CHECKPOINT_VERSION = 1
_ACT_CODES = {"identity": 0, "tanh": 1}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}


@dataclass
class Checkpoint:
    net: EmbeddingNet
    head: CosineHead
    registry: dict[int, int]            # global label -> head row
    config_text: str = ""
    version: int = CHECKPOINT_VERSION


class _Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def u32(self, v: int):
        self.parts.append(struct.pack("<I", v))

    def i64(self, v: int):
        self.parts.append(struct.pack("<q", v))

    def f64(self, v: float):
        self.parts.append(struct.pack("<d", v))

    def array(self, a: np.ndarray):
        flat = np.ascontiguousarray(a, dtype="<f8").reshape(-1)
        self.parts.append(struct.pack("<Q", flat.size))
        self.parts.append(flat.tobytes())

    def blob(self, data: bytes):
        self.parts.append(struct.pack("<Q", len(data)))
        self.parts.append(data)

    def payload(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ChecksumMismatchError("checkpoint payload ends early")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def i64(self) -> int:
        return struct.unpack("<q", self.take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def array(self, shape) -> np.ndarray:
        count = struct.unpack("<Q", self.take(8))[0]
        expected = int(np.prod(shape)) if shape else count
        if count != expected:
            raise CheckpointError(f"array holds {count} values, expected {expected}")
        flat = np.frombuffer(self.take(8 * count), dtype="<f8")
        return flat.astype(np.float64).reshape(shape)

    def blob(self) -> bytes:
        n = struct.unpack("<Q", self.take(8))[0]
        return self.take(n)


def save_checkpoint(path, cp: Checkpoint) -> None:
    w = _Writer()
    w.parts.append(_MAGIC)
    w.u32(cp.version)
    net, head = cp.net, cp.head
    w.u32(net.in_dim)
    w.u32(net.mid_dim)
    w.u32(net.embed_dim)
    w.u32(len(net.h_layers))
    w.u32(len(net.g_layers))
    w.u32(head.num_known)
    w.u32(head.num_virtual)
    w.u32(head.num_base)
    w.f64(head.scale)
    for layer in net.h_layers + net.g_layers:
        w.u32(layer.out_dim)
        w.u32(layer.in_dim)
        w.u32(_ACT_CODES[layer.activation])
        w.array(layer.weight)
        w.array(layer.bias)
    w.array(head.known)
    w.array(head.virtual)
    w.u32(len(cp.registry))
    for label in sorted(cp.registry):
        w.i64(int(label))
        w.u32(int(cp.registry[label]))
    w.blob(cp.config_text.encode("utf-8"))
    payload = w.payload()
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(struct.pack("<I", crc))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(_MAGIC) + 8:
        raise ChecksumMismatchError("file too short to be a checkpoint")
    payload, crc_bytes = raw[:-4], raw[-4:]
    if zlib.crc32(payload) & 0xFFFFFFFF != struct.unpack("<I", crc_bytes)[0]:
        raise ChecksumMismatchError("checksum does not match payload")
    r = _Reader(payload)
    if r.take(len(_MAGIC)) != _MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(
            f"checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
    in_dim, mid_dim, embed_dim = r.u32(), r.u32(), r.u32()
    n_h, n_g = r.u32(), r.u32()
    n_known, n_virtual, num_base = r.u32(), r.u32(), r.u32()
    scale = r.f64()
    layers = []
    for _ in range(n_h + n_g):
        out_dim, l_in, act = r.u32(), r.u32(), r.u32()
        weight = r.array((out_dim, l_in))
        bias = r.array((out_dim,))
        layers.append(AffineLayer(weight, bias, _ACT_NAMES[act]))
    net = EmbeddingNet(layers[:n_h], layers[n_h:])
    if (net.in_dim, net.mid_dim, net.embed_dim) != (in_dim, mid_dim, embed_dim):
        raise CheckpointError("layer shapes disagree with the header")
    known = r.array((n_known, embed_dim))
    virtual = r.array((n_virtual, embed_dim))
    head = CosineHead(known, virtual, scale=scale, num_base=num_base)
    registry = {}
    for _ in range(r.u32()):
        label = r.i64()
        registry[label] = r.u32()
    config_text = r.blob().decode("utf-8")
    return Checkpoint(net, head, registry, config_text, version)
