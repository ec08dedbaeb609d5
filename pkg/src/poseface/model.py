"""Trainable stack: backbone -> (identity head -> feature layer, pose head), margin classifier.

The heads project with their raw weights; the orthogonality penalty looks only
at column-normalised copies, so column scale never enters the constraint.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import DegenerateColumnError, FormatError, ShapeError
from .layers import Linear, _Reader, glorot_uniform, read_layer_table, write_layer_table
from .tensor import Tensor

MODEL_MAGIC = b"POSEFACE1"


@dataclass(frozen=True)
class ModelDims:
    d_in: int = 64
    d_b: int = 64  # paper-scale models use 512
    d: int = 32
    d_o: int = 32
    d_p: int = 32
    hidden: tuple[int, ...] = (128,)

    def __post_init__(self):
        for name in ("d_in", "d_b", "d", "d_o", "d_p"):
            if getattr(self, name) <= 0:
                raise ShapeError(f"{name} must be positive")
        if self.d + self.d_p > self.d_b:
            raise ShapeError(f"d + d_p = {self.d + self.d_p} exceeds d_b = {self.d_b}: "
                             "orthogonal subspaces of those ranks cannot fit")


@dataclass
class Backbone:
    layers: list[Linear]

    @property
    def d_in(self) -> int:
        return self.layers[0].n_in

    @property
    def d_b(self) -> int:
        return self.layers[-1].n_out

    def parameters(self) -> list[Tensor]:
        return [p for l in self.layers for p in l.parameters()]


@dataclass
class ProjectionHeads:
    w_i: Tensor  # (d_b, d)
    w_p: Tensor  # (d_b, d_p)
    feature: Linear  # d -> d_o, with bias, no activation

    def parameters(self) -> list[Tensor]:
        return [self.w_i, self.w_p, *self.feature.parameters()]


@dataclass
class MarginClassifier:
    weight: Tensor  # (d_o, n); columns are class centres
    scale: float = 64.0
    m_b: float = 0.5
    delta_m: float = 0.2

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale s must be positive")
        if not 0.0 <= self.m_b < math.pi / 2:
            raise ValueError("base margin must lie in [0, pi/2)")
        if self.delta_m < 0 or self.m_b + self.delta_m >= math.pi / 2:
            raise ValueError("need delta_m >= 0 and m_b + delta_m < pi/2")

    @property
    def n_classes(self) -> int:
        return self.weight.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.weight]


@dataclass
class PoseFaceModel:
    backbone: Backbone
    heads: ProjectionHeads
    classifier: MarginClassifier
    manifest: dict = field(default_factory=dict)

    def parameters(self) -> list[Tensor]:
        return self.backbone.parameters() + self.heads.parameters() + self.classifier.parameters()

    def snapshot(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]


def build_model(dims: ModelDims, n_classes: int, seed: int = 0, scale: float = 64.0, m_b: float = 0.5,
                delta_m: float = 0.2, dtype=np.float64) -> PoseFaceModel:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x90FE]))
    sizes = [dims.d_in, *dims.hidden, dims.d_b]
    backbone = Backbone([Linear.init(rng, a, b, dtype=dtype) for a, b in zip(sizes[:-1], sizes[1:])])
    w_i = Tensor(glorot_uniform(rng, dims.d_b, dims.d), requires_grad=True, dtype=dtype)
    w_p = Tensor(glorot_uniform(rng, dims.d_b, dims.d_p), requires_grad=True, dtype=dtype)
    heads = ProjectionHeads(w_i, w_p, Linear.init(rng, dims.d, dims.d_o, dtype=dtype))
    centres = rng.normal(size=(dims.d_o, n_classes))
    centres /= np.linalg.norm(centres, axis=0, keepdims=True)
    classifier = MarginClassifier(Tensor(centres, requires_grad=True, dtype=dtype), scale, m_b, delta_m)
    return PoseFaceModel(backbone, heads, classifier)


def backbone_forward(bb: Backbone, observation) -> Tensor:
    """Relu MLP; the last layer is linear so F_b can take either sign."""
    x = observation if isinstance(observation, Tensor) else Tensor(np.atleast_2d(observation))
    if x.ndim != 2 or x.shape[1] != bb.d_in:
        raise ShapeError(f"backbone expects (N, {bb.d_in}) observations, got {x.shape}")
    h = x
    for layer in bb.layers[:-1]:
        h = T.relu(layer(h))
    return bb.layers[-1](h)


def project(heads: ProjectionHeads, F_b: Tensor) -> tuple[Tensor, Tensor]:
    """F_i = W_I^T F_b and F_p = W_P^T F_b, batched as rows."""
    if F_b.ndim != 2 or F_b.shape[1] != heads.w_i.shape[0]:
        raise ShapeError(f"F_b shape {F_b.shape} incompatible with heads of input dim {heads.w_i.shape[0]}")
    return F_b @ heads.w_i, F_b @ heads.w_p


def feature_layer_forward(heads: ProjectionHeads, F_i: Tensor) -> Tensor:
    return heads.feature(F_i)


def column_normalize(W) -> Tensor:
    W = W if isinstance(W, Tensor) else Tensor(W)
    if W.ndim != 2:
        raise ShapeError(f"column_normalize needs a matrix, got {W.shape}")
    return T.l2_normalize(W, axis=0, exc=DegenerateColumnError)


def orth_penalty(W_I, W_P) -> Tensor:
    """||W~_I^T W~_P||_F with column-normalised weights."""
    W_I = W_I if isinstance(W_I, Tensor) else Tensor(W_I)
    W_P = W_P if isinstance(W_P, Tensor) else Tensor(W_P)
    if W_I.shape[0] != W_P.shape[0]:
        raise ShapeError(f"W_I and W_P live in different spaces: {W_I.shape} vs {W_P.shape}")
    return T.norm(column_normalize(W_I).T @ column_normalize(W_P))


@dataclass
class Features:
    F_b: Tensor
    F_i: Tensor
    F_p: Tensor
    F_o: Tensor


def forward(model: PoseFaceModel, observations) -> Features:
    F_b = backbone_forward(model.backbone, observations)
    F_i, F_p = project(model.heads, F_b)
    return Features(F_b, F_i, F_p, feature_layer_forward(model.heads, F_i))


def embed(model: PoseFaceModel, observations, batch_size: int = 1024) -> np.ndarray:
    """Recognition features F_o (no gradient tracking)."""
    obs = np.asarray(observations, dtype=model.backbone.layers[0].weight.dtype)
    parts = [forward(model, Tensor(obs[i:i + batch_size])).F_o.data for i in range(0, len(obs), batch_size)]
    return np.concatenate(parts) if parts else np.zeros((0, model.heads.feature.n_out))


# ---------------------------------------------------------------------------
# checkpoint: "POSEFACE1", u32 manifest length, UTF-8 JSON manifest, layer table
# (backbone layers, W_I, W_P, feature layer, classifier).  Layers without a
# bias store zeros.
# ---------------------------------------------------------------------------

def save_model(model: PoseFaceModel, path, manifest: dict | None = None) -> None:
    man = dict(model.manifest)
    man.update(manifest or {})
    hidden = [l.n_out for l in model.backbone.layers[:-1]]
    man.update(
        d_in=model.backbone.d_in, d_b=model.backbone.d_b, d=model.heads.w_i.shape[1],
        d_o=model.heads.feature.n_out, d_p=model.heads.w_p.shape[1], n=model.classifier.n_classes,
        s=model.classifier.scale, m_b=model.classifier.m_b, delta_m=model.classifier.delta_m, hidden=hidden,
    )
    blob = json.dumps(man, sort_keys=True).encode("utf-8")
    zeros = lambda k: np.zeros(k)
    layers = [(l.weight.data, l.bias.data) for l in model.backbone.layers]
    layers += [(model.heads.w_i.data, zeros(model.heads.w_i.shape[1])),
               (model.heads.w_p.data, zeros(model.heads.w_p.shape[1])),
               (model.heads.feature.weight.data, model.heads.feature.bias.data),
               (model.classifier.weight.data, zeros(model.classifier.n_classes))]
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        write_layer_table(fh, layers)


def load_model(path) -> PoseFaceModel:
    buf = Path(path).read_bytes()
    if buf[:len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise FormatError("bad model magic", 0)
    reader = _Reader(buf, len(MODEL_MAGIC))
    (n,) = reader.unpack("<I", "manifest length")
    start = reader.pos
    try:
        man = json.loads(reader.take(n, "manifest").decode("utf-8"))
        hidden = list(man["hidden"])
    except (ValueError, KeyError, TypeError):
        raise FormatError("unreadable manifest", start) from None
    layers = read_layer_table(reader)
    if reader.pos != len(buf):
        raise FormatError("trailing bytes after layer table", reader.pos)
    n_bb = len(hidden) + 1
    if len(layers) != n_bb + 4:
        raise FormatError(f"expected {n_bb + 4} layers, found {len(layers)}", start + n)
    leaf = lambda a: Tensor(a, requires_grad=True)
    backbone = Backbone([Linear(leaf(w), leaf(b)) for w, b in layers[:n_bb]])
    w_i, w_p, (fw, fb), (cw, _) = layers[n_bb][0], layers[n_bb + 1][0], layers[n_bb + 2], layers[n_bb + 3]
    heads = ProjectionHeads(leaf(w_i), leaf(w_p), Linear(leaf(fw), leaf(fb)))
    classifier = MarginClassifier(leaf(cw), man["s"], man["m_b"], man["delta_m"])
    model = PoseFaceModel(backbone, heads, classifier, man)
    ModelDims(backbone.d_in, backbone.d_b, w_i.shape[1], fw.shape[1], w_p.shape[1], tuple(hidden))
    return model
