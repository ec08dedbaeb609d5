"""Evaluation protocols: rank-1 identification by yaw bucket, ROC-based verification
metrics, k-fold verification accuracy, and feature-geometry probes.

Conventions (all deterministic):

* a pair is accepted when ``score >= threshold``;
* the ROC is the polyline through (0, 0) and one point per unique score,
  swept from the highest score down;
* EER is where FAR = FRR on that polyline (linear interpolation);
* TAR@FAR is the upper envelope of the polyline at the requested FAR; below
  1/#impostors it saturates to the TAR at FAR = 0 and says so;
* k-fold threshold selection keeps the lowest threshold among ties;
* rank-1 ties go to the lowest identity index.
"""
from __future__ import annotations

import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import DegenerateScoreError, FormatError, ShapeError, FoldError
from .layers import _Reader

EMB_MAGIC = b"POSEEMB1"
PROFILE_YAW = 60.0
BUCKET_WIDTH = 15.0


def worker_threads() -> int:
    try:
        return max(1, int(os.environ.get("POSEFACE_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

@dataclass
class ScoreSet:
    scores: np.ndarray
    labels: np.ndarray  # True = genuine

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels, dtype=bool).reshape(-1)
        if self.scores.shape != self.labels.shape:
            raise ShapeError(f"{len(self.scores)} scores but {len(self.labels)} labels")

    @property
    def n_genuine(self) -> int:
        return int(self.labels.sum())

    @property
    def n_impostor(self) -> int:
        return int((~self.labels).sum())

    def check(self) -> None:
        if self.n_genuine == 0 or self.n_impostor == 0:
            raise DegenerateScoreError("need at least one genuine and one impostor score")


@dataclass
class RocCurve:
    far: np.ndarray
    tar: np.ndarray
    thresholds: np.ndarray  # first entry is +inf (accept nothing)


def roc(ss: ScoreSet) -> RocCurve:
    ss.check()
    order = np.argsort(-ss.scores, kind="stable")
    s = ss.scores[order]
    lab = ss.labels[order]
    tp = np.cumsum(lab)
    fp = np.cumsum(~lab)
    # last position of each run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    far = np.r_[0.0, fp[ends] / ss.n_impostor]
    tar = np.r_[0.0, tp[ends] / ss.n_genuine]
    return RocCurve(far, tar, np.r_[np.inf, s[ends]])


def auc(ss: ScoreSet) -> float:
    c = roc(ss)
    return float(np.sum(np.diff(c.far) * (c.tar[1:] + c.tar[:-1]) / 2.0))


def eer(ss: ScoreSet) -> float:
    c = roc(ss)
    d = c.far + c.tar - 1.0  # FAR - FRR
    k = int(np.flatnonzero(d >= 0)[0])
    if d[k] == 0 or k == 0:
        return float(c.far[k])
    a = -d[k - 1] / (d[k] - d[k - 1])
    return float(c.far[k - 1] + a * (c.far[k] - c.far[k - 1]))


class TarAtFar(NamedTuple):
    tar: float
    far: float  # FAR at which the TAR was read
    saturated: bool  # requested FAR is below 1/#impostors


def tar_at_far(ss: ScoreSet, far: float) -> TarAtFar:
    if not 0.0 <= far <= 1.0:
        raise ValueError("FAR must lie in [0, 1]")
    c = roc(ss)
    if far < 1.0 / ss.n_impostor:
        return TarAtFar(float(c.tar[c.far == 0.0].max()), 0.0, far > 0.0)
    best = 0.0
    for k in range(len(c.far) - 1):
        f0, f1 = c.far[k], c.far[k + 1]
        if f0 <= far <= f1:
            t = c.tar[k + 1] if f1 == f0 else c.tar[k] + (far - f0) / (f1 - f0) * (c.tar[k + 1] - c.tar[k])
            best = max(best, float(t))
    return TarAtFar(best, float(far), False)


def _best_threshold(scores: np.ndarray, labels: np.ndarray) -> float:
    cand = np.r_[np.unique(scores), np.inf]
    accept = scores[None, :] >= cand[:, None]
    acc = (accept == labels[None, :]).mean(axis=1)
    return float(cand[int(np.argmax(acc))])  # argmax keeps the first (lowest) maximiser


def kfold_accuracy(ss: ScoreSet, folds=None, k: int = 10) -> tuple[float, float]:
    """Mean and population standard deviation of held-out accuracy.

    ``folds`` assigns each score to a fold; by default the scores are cut into
    ``k`` contiguous, nearly equal blocks.
    """
    n = len(ss.scores)
    if folds is None:
        if k < 2 or n < k:
            raise FoldError("need k >= 2 and at least k scores")
        folds = np.repeat(np.arange(k), [len(b) for b in np.array_split(np.arange(n), k)])
    folds = np.asarray(folds)
    if folds.shape != (n,):
        raise ShapeError("one fold index per score is required")
    ids = np.unique(folds)
    if len(ids) < 2:
        raise FoldError("need at least two folds")
    for f in ids:
        lab = ss.labels[folds == f]
        if lab.all() or not lab.any():
            raise FoldError(f"fold {f} contains only one class")

    def run(f) -> float:
        held = folds == f
        t = _best_threshold(ss.scores[~held], ss.labels[~held])
        return float(((ss.scores[held] >= t) == ss.labels[held]).mean())

    with ThreadPoolExecutor(max_workers=worker_threads()) as pool:
        accs = np.array(list(pool.map(run, ids)))
    return float(accs.mean()), float(accs.std())


# ---------------------------------------------------------------------------
# identification
# ---------------------------------------------------------------------------

def yaw_bucket(yaw) -> np.ndarray:
    """Bucket label 15, 30, ..., 90 for |yaw| in [0,15], (15,30], ..., (75,90]."""
    a = np.minimum(np.abs(np.asarray(yaw, dtype=np.float64)), 90.0)
    return (BUCKET_WIDTH * np.maximum(1, np.ceil(a / BUCKET_WIDTH))).astype(int)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(n > 0, n, 1.0)


@dataclass
class IdentificationProtocol:
    gallery: np.ndarray  # (G, dim), one frontal embedding per identity
    gallery_ids: np.ndarray  # (G,)
    probes: np.ndarray  # (P, dim)
    probe_ids: np.ndarray  # (P,)
    probe_yaw: np.ndarray  # (P,)

    def __post_init__(self):
        self.gallery = np.asarray(self.gallery, dtype=np.float64)
        self.probes = np.asarray(self.probes, dtype=np.float64)
        self.gallery_ids = np.asarray(self.gallery_ids, dtype=np.int64)
        self.probe_ids = np.asarray(self.probe_ids, dtype=np.int64)
        self.probe_yaw = np.asarray(self.probe_yaw, dtype=np.float64)
        if len(np.unique(self.gallery_ids)) != len(self.gallery_ids):
            raise ValueError("gallery identities must be unique")
        if self.gallery.shape[0] != len(self.gallery_ids) or self.probes.shape[0] != len(self.probe_ids):
            raise ShapeError("embedding and identity counts differ")
        if self.probe_yaw.shape != self.probe_ids.shape or self.gallery.shape[1] != self.probes.shape[1]:
            raise ShapeError("probe yaw/embedding shapes are inconsistent")


@dataclass
class Rank1Result:
    per_bucket: dict[int, float]
    counts: dict[int, int]
    overall: float
    profile: float | None  # |yaw| > 60
    frontal: float | None
    correct: np.ndarray = field(repr=False)


def predict_identities(protocol: IdentificationProtocol) -> np.ndarray:
    order = np.argsort(protocol.gallery_ids, kind="stable")
    g = _unit_rows(protocol.gallery[order])
    sims = _unit_rows(protocol.probes) @ g.T
    return protocol.gallery_ids[order][np.argmax(sims, axis=1)]


def rank1(protocol: IdentificationProtocol) -> Rank1Result:
    correct = predict_identities(protocol) == protocol.probe_ids
    buckets = yaw_bucket(protocol.probe_yaw)
    per, counts = {}, {}
    for b in sorted(set(buckets.tolist())):
        sel = buckets == b
        per[b] = float(correct[sel].mean())
        counts[b] = int(sel.sum())
    prof = np.abs(protocol.probe_yaw) > PROFILE_YAW
    return Rank1Result(
        per, counts,
        float(correct.mean()) if len(correct) else float("nan"),
        float(correct[prof].mean()) if prof.any() else None,
        float(correct[~prof].mean()) if (~prof).any() else None,
        correct,
    )


# ---------------------------------------------------------------------------
# feature geometry
# ---------------------------------------------------------------------------

@dataclass
class OrthProbe:
    max: float
    min: float
    matrix: np.ndarray  # |<identity_j, pose_k>| for all sample pairs


def orth_probe_features(F_i: np.ndarray, F_p: np.ndarray, W_I: np.ndarray, W_P: np.ndarray) -> OrthProbe:
    """Products of normalised identity and pose features, both mapped back into backbone space.

    ``W_I @ F_i`` lies in span(W_I) and ``W_P @ F_p`` in span(W_P), so the
    products vanish exactly when the two subspaces are orthogonal.
    """
    ident = _unit_rows(np.asarray(F_i) @ np.asarray(W_I).T)
    pose = _unit_rows(np.asarray(F_p) @ np.asarray(W_P).T)
    if len(ident) < 2:
        raise ValueError("orth_probe needs at least two samples")
    m = np.abs(ident @ pose.T)
    return OrthProbe(float(m.max()), float(m.min()), m)


def orth_probe(model, observations) -> OrthProbe:
    from .model import forward
    from .tensor import Tensor
    feats = forward(model, Tensor(np.asarray(observations, dtype=np.float64)))
    return orth_probe_features(feats.F_i.data, feats.F_p.data, model.heads.w_i.data, model.heads.w_p.data)


def class_geometry(embeddings, labels) -> tuple[float, float]:
    """(mean within-class pairwise distance, mean distance between class centroids).

    The intra mean pools all within-class pairs, so singleton classes add nothing.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError("class_geometry needs at least two classes")
    total, pairs = 0.0, 0
    centroids = []
    for c in classes:
        e = x[y == c]
        centroids.append(e.mean(axis=0))
        if len(e) > 1:
            d = np.sqrt(np.maximum(((e[:, None, :] - e[None, :, :]) ** 2).sum(-1), 0.0))
            iu = np.triu_indices(len(e), 1)
            total += d[iu].sum()
            pairs += len(iu[0])
    cen = np.array(centroids)
    dc = np.sqrt(((cen[:, None, :] - cen[None, :, :]) ** 2).sum(-1))
    iu = np.triu_indices(len(cen), 1)
    intra = total / pairs if pairs else 0.0
    return float(intra), float(dc[iu].mean())


def pca_project(x, k: int = 2) -> np.ndarray:
    """Project onto the top-``k`` principal components (sign fixed by the largest loading)."""
    x = np.asarray(x, dtype=np.float64)
    xc = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    comps = vt[:k]
    signs = np.sign(comps[np.arange(len(comps)), np.argmax(np.abs(comps), axis=1)])
    return xc @ (comps * signs[:, None]).T


# ---------------------------------------------------------------------------
# embedding exchange file: "POSEEMB1", u32 count, u32 dim, then per record
# u32 identity, f64 yaw, dim f64 values (little-endian)
# ---------------------------------------------------------------------------

def write_embeddings(path, identities, yaws, embeddings) -> None:
    emb = np.asarray(embeddings, dtype=np.float64)
    n, dim = emb.shape
    rec = np.zeros(n, dtype=np.dtype([("id", "<u4"), ("yaw", "<f8"), ("v", "<f8", (dim,))]))
    rec["id"] = identities
    rec["yaw"] = yaws
    rec["v"] = emb
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC + struct.pack("<II", n, dim) + rec.tobytes())


def read_embeddings(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != EMB_MAGIC:
        raise FormatError("bad embedding magic", 0)
    reader = _Reader(buf, 8)
    n, dim = reader.unpack("<II", "header")
    dt = np.dtype([("id", "<u4"), ("yaw", "<f8"), ("v", "<f8", (dim,))])
    rec = np.frombuffer(reader.take(n * dt.itemsize, "records"), dtype=dt)
    if reader.pos != len(buf):
        raise FormatError("trailing bytes after the last record", reader.pos)
    return rec["id"].astype(np.int64), rec["yaw"].astype(np.float64), rec["v"].reshape(n, dim).astype(np.float64)
