"""Angular-margin classification losses and the combined disentanglement objective."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .autoencoder import AutoEncoderModel, encode
from .errors import DegenerateColumnError, DegenerateEmbeddingError, ShapeError
from .geometry import adaptive_ratio
from .model import MarginClassifier, PoseFaceModel, forward, orth_penalty
from .tensor import Tensor

DEFAULT_LAMBDA1 = 200.0
DEFAULT_LAMBDA2 = 1e5


@dataclass
class BatchLabels:
    y: np.ndarray  # (N,) class indices
    r: np.ndarray  # (N,) adaptive ratios in [0, 1]

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        self.r = np.asarray(self.r, dtype=np.float64)
        if self.y.ndim != 1 or self.y.shape != self.r.shape:
            raise ShapeError(f"labels {self.y.shape} and ratios {self.r.shape} must be equal-length vectors")
        if np.any((self.r < 0) | (self.r > 1)):
            raise ValueError("adaptive ratios must lie in [0, 1]")

    @classmethod
    def from_yaw(cls, y, yaw) -> "BatchLabels":
        return cls(y, adaptive_ratio(np.asarray(yaw, dtype=np.float64)))

    def __len__(self) -> int:
        return len(self.y)


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = DEFAULT_LAMBDA1
    lambda2: float = DEFAULT_LAMBDA2

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("Lagrange multipliers must be non-negative")


def cosine_logits(F_o: Tensor, classifier: MarginClassifier) -> Tensor:
    emb = T.l2_normalize(F_o, axis=1, exc=DegenerateEmbeddingError)
    centres = T.l2_normalize(classifier.weight, axis=0, exc=DegenerateColumnError)
    return emb @ centres


def margin_logits(F_o: Tensor, classifier: MarginClassifier, labels, margins) -> Tensor:
    """s * cos(theta_j), with the target entry replaced by s * cos(theta_y + m_i).

    Past the wrap point (theta_y > pi - m_i) the target uses the usual
    extension s * (cos(theta_y) - m_i * sin(m_i)).
    """
    y = np.asarray(labels, dtype=np.int64)
    m = np.asarray(margins, dtype=F_o.dtype)
    if F_o.ndim != 2 or y.shape != (F_o.shape[0],) or m.shape != y.shape:
        raise ShapeError(f"batch of {F_o.shape} with labels {y.shape} and margins {m.shape}")
    if np.any((m < 0) | (m >= math.pi / 2)):
        raise ValueError("margins must lie in [0, pi/2)")
    n = classifier.n_classes
    cos = cosine_logits(F_o, classifier)
    c_y = T.gather(cos, y)
    theta = T.arccos(c_y)
    main = T.cos(theta + Tensor(m))
    ext = c_y - Tensor(m * np.sin(m))
    wrapped = T.select(theta.data <= math.pi - m, main, ext)
    target = T.select(m == 0, c_y, wrapped)
    off_target = np.ones((len(y), n), dtype=F_o.dtype)
    off_target[np.arange(len(y)), y] = 0.0
    return classifier.scale * (cos * Tensor(off_target) + T.scatter(target, y, n))


def cross_entropy(logits: Tensor, y) -> Tensor:
    """Batch-mean softmax cross-entropy via log-sum-exp."""
    return T.mean(T.logsumexp(logits) - T.gather(logits, y))


def arcface_loss(F_o: Tensor, classifier: MarginClassifier, y, margin: float | None = None) -> Tensor:
    """Fixed-margin angular loss (margin defaults to the classifier's base margin)."""
    y = np.asarray(y, dtype=np.int64)
    m = classifier.m_b if margin is None else margin
    return cross_entropy(margin_logits(F_o, classifier, y, np.full(len(y), m)), y)


def paa_margins(classifier: MarginClassifier, r) -> np.ndarray:
    return classifier.m_b + np.asarray(r, dtype=np.float64) * classifier.delta_m


def paa_loss(F_o: Tensor, classifier: MarginClassifier, labels: BatchLabels) -> Tensor:
    """Pose-adaptive margin loss with per-sample margin m_b + r_i * delta_m."""
    if len(labels) != F_o.shape[0]:
        raise ShapeError(f"{len(labels)} labels for a batch of {F_o.shape[0]}")
    return cross_entropy(margin_logits(F_o, classifier, labels.y, paa_margins(classifier, labels.r)), labels.y)


def pose_loss(F_p: Tensor, F_p_L, squared: bool = False) -> Tensor:
    """Batch mean of ||F_p^L - F_p||_2 (or its square); the target is a constant."""
    target = np.asarray(F_p_L.data if isinstance(F_p_L, Tensor) else F_p_L, dtype=F_p.dtype)
    if F_p.ndim == 1:
        F_p = T.reshape(F_p, (1, -1))
        target = target.reshape(1, -1)
    if target.shape != F_p.shape:
        raise ShapeError(f"pose features {F_p.shape} vs pseudo-labels {target.shape}")
    diff = F_p - Tensor(target)
    if squared:
        return T.mean(T.sum_(diff * diff, axis=1))
    return T.mean(T.row_norms(diff))


@dataclass
class Batch:
    observations: np.ndarray  # (N, d_in)
    labels: BatchLabels
    heatmaps: np.ndarray | None = None  # (N, 14*h*w), encoded on demand
    pose_target: np.ndarray | None = None  # (N, d_p), precomputed pseudo-labels


@dataclass
class LossBreakdown:
    total: Tensor
    paa: Tensor
    pose: Tensor
    orth: Tensor

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("total", "paa", "pose", "orth")}


def poseface_loss(batch: Batch, model: PoseFaceModel, classifier: MarginClassifier,
                  ae_model: AutoEncoderModel | None, weights: LossWeights,
                  squared_pose: bool = False) -> LossBreakdown:
    """L_PAA + lambda1 * pose_loss + lambda2 * orth_penalty, with the three parts."""
    feats = forward(model, Tensor(np.asarray(batch.observations, dtype=model.heads.w_i.dtype)))
    paa = paa_loss(feats.F_o, classifier, batch.labels)
    target = batch.pose_target
    if target is None and ae_model is not None and batch.heatmaps is not None:
        target = encode(ae_model, batch.heatmaps)
    if target is None:
        pose = Tensor(0.0, dtype=paa.dtype)
    else:
        pose = pose_loss(feats.F_p, target, squared_pose)
    orth = orth_penalty(model.heads.w_i, model.heads.w_p)
    total = paa
    if weights.lambda1:
        total = total + weights.lambda1 * pose
    if weights.lambda2:
        total = total + weights.lambda2 * orth
    return LossBreakdown(total, paa, pose, orth)
