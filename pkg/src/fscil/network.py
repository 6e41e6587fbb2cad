"""Two-stage embedding network and the cosine prototype head.

The embedding factors as g(h(x)): ``h`` maps raw inputs to a mid-level
feature and ``g`` maps that feature to the final embedding.  The split
exists so callers can fuse mid-level features of two instances and push
the blend through the remaining layers.  Forward passes return caches
that the matching backward passes consume; all parameters are plain
float64 arrays and every gradient is written out by hand.

The head stores prototypes unnormalized and normalizes per use.  It also
exposes a raw dot-product mode (``normalize=False``), which is the regime
the closed-form gradient expressions assume.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimensionMismatchError,
    InvalidParameterError,
    NonFiniteError,
    StaleCacheError,
    ZeroNormError,
)
from .numerics import NORM_EPS, Rng

_ACTIVATIONS = ("identity", "tanh")


def _ensure_matrix(x, dim: int, what: str) -> tuple[np.ndarray, bool]:
    """Promote 1-D input to a single-row matrix; report whether it was 1-D."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
        single = True
    elif a.ndim == 2:
        single = False
    else:
        raise DimensionMismatchError(f"{what} must be 1-D or 2-D, got shape {a.shape}")
    if a.shape[1] != dim:
        raise DimensionMismatchError(f"{what} has dimension {a.shape[1]}, expected {dim}")
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return a, single


class AffineLayer:
    """One affine map plus an elementwise nonlinearity."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray, activation: str = "identity"):
        weight = np.asarray(weight, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if weight.ndim != 2 or bias.ndim != 1 or weight.shape[0] != bias.shape[0]:
            raise DimensionMismatchError(
                f"incompatible layer shapes {weight.shape} / {bias.shape}"
            )
        if activation not in _ACTIVATIONS:
            raise InvalidParameterError(f"unknown activation {activation!r}")
        self.weight = weight
        self.bias = bias
        self.activation = activation

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def random(cls, in_dim: int, out_dim: int, rng: Rng, activation: str = "identity"):
        bound = 1.0 / np.sqrt(in_dim)
        weight = rng.uniform_array(-bound, bound, (out_dim, in_dim))
        bias = rng.uniform_array(-bound, bound, out_dim)
        return cls(weight, bias, activation)

    def forward(self, x: np.ndarray):
        pre = x @ self.weight.T + self.bias
        out = np.tanh(pre) if self.activation == "tanh" else pre
        # tanh' = 1 - out^2, so caching the output suffices for backward
        return out, (x, out)

    def backward(self, d_out: np.ndarray, cache):
        x, out = cache
        if d_out.shape != out.shape:
            raise StaleCacheError(
                f"gradient shape {d_out.shape} does not match cached output {out.shape}"
            )
        d_pre = d_out * (1.0 - out * out) if self.activation == "tanh" else d_out
        d_weight = d_pre.T @ x
        d_bias = d_pre.sum(axis=0)
        d_x = d_pre @ self.weight
        return d_x, d_weight, d_bias

    def copy(self) -> "AffineLayer":
        return AffineLayer(self.weight.copy(), self.bias.copy(), self.activation)


class EmbeddingNet:
    """Feature extractor split at the mid layer: input -> mid -> embedding."""

    def __init__(self, h_layers: list[AffineLayer], g_layers: list[AffineLayer]):
        if not h_layers or not g_layers:
            raise InvalidParameterError("both stages need at least one layer")
        for prev, nxt in zip(h_layers + g_layers, (h_layers + g_layers)[1:]):
            if prev.out_dim != nxt.in_dim:
                raise DimensionMismatchError(
                    f"layer chain breaks: {prev.out_dim} -> {nxt.in_dim}"
                )
        self.h_layers = h_layers
        self.g_layers = g_layers

    @classmethod
    def build(cls, in_dim: int, mid_dim: int, embed_dim: int, rng: Rng) -> "EmbeddingNet":
        """Default desk-scale architecture: tanh mid stage, linear output stage."""
        h = [AffineLayer.random(in_dim, mid_dim, rng.derive("h", 0), activation="tanh")]
        g = [AffineLayer.random(mid_dim, embed_dim, rng.derive("g", 0))]
        return cls(h, g)

    @property
    def in_dim(self) -> int:
        return self.h_layers[0].in_dim

    @property
    def mid_dim(self) -> int:
        return self.h_layers[-1].out_dim

    @property
    def embed_dim(self) -> int:
        return self.g_layers[-1].out_dim

    def _run(self, layers, x):
        caches = []
        out = x
        for layer in layers:
            out, cache = layer.forward(out)
            caches.append(cache)
        return out, caches

    def forward_mid(self, x):
        """h(x) plus the caches needed to backpropagate through h."""
        a, single = _ensure_matrix(x, self.in_dim, "input")
        out, caches = self._run(self.h_layers, a)
        return (out[0] if single else out), caches

    def forward_from_mid(self, mid):
        """g(mid) plus the caches needed to backpropagate through g."""
        a, single = _ensure_matrix(mid, self.mid_dim, "mid-level feature")
        out, caches = self._run(self.g_layers, a)
        return (out[0] if single else out), caches

    def forward(self, x):
        """Full embedding g(h(x)); returns (embedding, (h caches, g caches))."""
        mid, h_caches = self.forward_mid(x)
        emb, g_caches = self.forward_from_mid(mid)
        return emb, (h_caches, g_caches)

    def _run_backward(self, layers, caches, d_out):
        if len(caches) != len(layers):
            raise StaleCacheError("cache count does not match layer count")
        grads = [None] * len(layers)
        d = d_out
        for i in range(len(layers) - 1, -1, -1):
            d, dw, db = layers[i].backward(d, caches[i])
            grads[i] = (dw, db)
        return d, grads

    def backward_g(self, d_emb: np.ndarray, g_caches):
        """Gradient through g: returns (d_mid, per-layer (dW, db))."""
        return self._run_backward(self.g_layers, g_caches, d_emb)

    def backward_h(self, d_mid: np.ndarray, h_caches):
        """Gradient through h: returns (d_input, per-layer (dW, db))."""
        return self._run_backward(self.h_layers, h_caches, d_mid)

    def param_arrays(self) -> list[np.ndarray]:
        """All parameter arrays in a fixed order (mutating them updates the net)."""
        out = []
        for layer in self.h_layers + self.g_layers:
            out.append(layer.weight)
            out.append(layer.bias)
        return out

    def copy(self) -> "EmbeddingNet":
        return EmbeddingNet(
            [l.copy() for l in self.h_layers], [l.copy() for l in self.g_layers]
        )


def _normalize_rows(m: np.ndarray, what: str):
    norms = np.sqrt((m * m).sum(axis=1))
    if np.any(norms <= NORM_EPS):
        bad = int(np.argmax(norms <= NORM_EPS))
        raise ZeroNormError(f"{what} row {bad} has norm {norms[bad]!r}")
    return m / norms[:, None], norms


@dataclass
class HeadCache:
    emb: np.ndarray
    emb_hat: np.ndarray
    emb_norm: np.ndarray
    proto: np.ndarray
    proto_hat: np.ndarray
    proto_norm: np.ndarray
    cos: np.ndarray
    scale_eff: float
    normalize: bool
    single: bool


class CosineHead:
    """Known-class prototypes plus reserved virtual prototypes.

    Logit layout: known classes occupy indices [0, num_known), virtual
    prototypes [num_known, num_known + num_virtual).  ``num_base`` records
    the known-class count at base training time, which fixes the offset of
    pseudo labels into the virtual block.
    """

    def __init__(self, known: np.ndarray, virtual: np.ndarray, scale: float = 16.0,
                 num_base: int | None = None):
        known = np.asarray(known, dtype=np.float64)
        virtual = np.asarray(virtual, dtype=np.float64)
        if known.ndim != 2 or virtual.ndim != 2:
            raise DimensionMismatchError("prototype blocks must be 2-D")
        if virtual.shape[0] >= 1 and known.shape[1] != virtual.shape[1]:
            raise DimensionMismatchError(
                f"prototype dims differ: {known.shape[1]} vs {virtual.shape[1]}"
            )
        if not scale > 0:
            raise InvalidParameterError(f"logit scale must be positive, got {scale!r}")
        self.known = known
        self.virtual = virtual
        self.scale = float(scale)
        self.num_base = known.shape[0] if num_base is None else int(num_base)

    @classmethod
    def init_random(cls, num_known: int, num_virtual: int, dim: int, rng: Rng,
                    scale: float = 16.0) -> "CosineHead":
        if num_virtual < 1:
            raise InvalidParameterError("base training needs at least one virtual prototype")
        bound = 1.0 / np.sqrt(dim)
        known = rng.derive("known").uniform_array(-bound, bound, (num_known, dim))
        # virtual prototypes start as unit directions scattered on the sphere
        raw = rng.derive("virtual").normal((num_virtual, dim))
        virtual = raw / np.sqrt((raw * raw).sum(axis=1))[:, None]
        return cls(known, virtual, scale=scale)

    @property
    def dim(self) -> int:
        return self.known.shape[1]

    @property
    def num_known(self) -> int:
        return self.known.shape[0]

    @property
    def num_virtual(self) -> int:
        return self.virtual.shape[0]

    @property
    def num_outputs(self) -> int:
        return self.num_known + self.num_virtual

    def prototypes(self) -> np.ndarray:
        return np.concatenate([self.known, self.virtual], axis=0)

    def param_arrays(self) -> list[np.ndarray]:
        return [self.known, self.virtual]

    def copy(self) -> "CosineHead":
        return CosineHead(self.known.copy(), self.virtual.copy(), self.scale, self.num_base)

    def logits(self, emb, use_scale: bool = True, normalize: bool = True):
        """Similarity logits against every prototype.

        With ``normalize`` (the default) each logit is scale * cos(w_k, emb),
        so values lie in [-scale, scale].  With ``normalize=False`` logits
        are plain (scaled) dot products.
        """
        e, single = _ensure_matrix(emb, self.dim, "embedding")
        proto = self.prototypes()
        scale_eff = self.scale if use_scale else 1.0
        if normalize:
            e_hat, e_norm = _normalize_rows(e, "embedding")
            p_hat, p_norm = _normalize_rows(proto, "prototype")
        else:
            e_hat, e_norm = e, np.ones(e.shape[0])
            p_hat, p_norm = proto, np.ones(proto.shape[0])
        cos = e_hat @ p_hat.T
        cache = HeadCache(e, e_hat, e_norm, proto, p_hat, p_norm, cos, scale_eff,
                          normalize, single)
        out = scale_eff * cos
        return (out[0] if single else out), cache

    def backward(self, d_logits, cache: HeadCache):
        """Chain upstream logit gradients onto the embedding and raw prototypes.

        Returns (d_emb, d_known, d_virtual) with shapes matching the forward
        inputs.  For the normalized path the per-row Jacobian of w -> w/|w|
        is (I - what what^T)/|w|, which yields the projected forms below.
        """
        d = np.asarray(d_logits, dtype=np.float64)
        if d.ndim == 1:
            d = d[None, :]
        if d.shape != cache.cos.shape:
            raise StaleCacheError(
                f"gradient shape {d.shape} does not match cached logits {cache.cos.shape}"
            )
        s = cache.scale_eff
        if cache.normalize:
            row_dot = (d * cache.cos).sum(axis=1, keepdims=True)
            d_emb = (s / cache.emb_norm[:, None]) * (d @ cache.proto_hat - row_dot * cache.emb_hat)
            col_dot = (d * cache.cos).sum(axis=0)
            d_proto = (s / cache.proto_norm[:, None]) * (
                d.T @ cache.emb_hat - col_dot[:, None] * cache.proto_hat
            )
        else:
            d_emb = s * (d @ cache.proto)
            d_proto = s * (d.T @ cache.emb)
        if cache.single:
            d_emb = d_emb[0]
        return d_emb, d_proto[: self.num_known], d_proto[self.num_known:]


@dataclass
class GradBuffer:
    """Per-parameter gradient accumulators mirroring a net and head."""

    net: list[np.ndarray] = field(default_factory=list)
    known: np.ndarray | None = None
    virtual: np.ndarray | None = None

    @classmethod
    def zeros(cls, net: EmbeddingNet, head: CosineHead) -> "GradBuffer":
        return cls(
            net=[np.zeros_like(p) for p in net.param_arrays()],
            known=np.zeros_like(head.known),
            virtual=np.zeros_like(head.virtual),
        )

    def arrays(self) -> list[np.ndarray]:
        return [*self.net, self.known, self.virtual]

    def add_net_layer_grads(self, offset: int, grads: list, coeff: float = 1.0) -> None:
        """Accumulate per-layer (dW, db) pairs starting at ``offset`` layers in."""
        for i, (dw, db) in enumerate(grads):
            self.net[2 * (offset + i)] += coeff * dw
            self.net[2 * (offset + i) + 1] += coeff * db


def cosine_logits(head: CosineHead, emb, use_scale: bool = True):
    """Normalized similarity logits against every prototype of ``head``."""
    return head.logits(emb, use_scale=use_scale)


def backward(net: EmbeddingNet, head: CosineHead, d_logits, caches) -> GradBuffer:
    """Full chain rule from logit gradients down to every parameter.

    ``caches`` is ((h caches, g caches), head cache) from a matching
    forward pass through ``net.forward`` and ``head.logits``.
    """
    (h_caches, g_caches), head_cache = caches
    buf = GradBuffer.zeros(net, head)
    d_emb, d_known, d_virtual = head.backward(d_logits, head_cache)
    buf.known += d_known
    buf.virtual += d_virtual
    if np.ndim(d_emb) == 1:
        d_emb = np.asarray(d_emb)[None, :]
    d_mid, g_grads = net.backward_g(d_emb, g_caches)
    buf.add_net_layer_grads(len(net.h_layers), g_grads)
    _, h_grads = net.backward_h(d_mid, h_caches)
    buf.add_net_layer_grads(0, h_grads)
    return buf
