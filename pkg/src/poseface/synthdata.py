"""Synthetic pose-imbalanced face benchmark with independent identity and pose factors.

Each identity k has a latent ``z_k`` on the unit sphere of R^{d_in/2} and its
own jittered copy of the 3-D landmark template.  A sample at yaw ``a`` is

    o = A z_k + B phi(a) + eps,     phi(a) = (sin ja, cos ja), j = 1..4

with seeded mixing matrices A, B.  Its landmarks are the identity template
rotated by ``a`` and projected orthographically.  Every random draw comes from
a stream keyed on (seed, purpose, index), so generation is order independent.
"""
from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import FormatError, SpecError
from .geometry import DEFAULT_FRAME, N_LANDMARKS, TEMPLATE_3D, LandmarkSet, project_template
from .layers import _Reader

DS_MAGIC = b"POSEDS01"
PROFILE_YAW = 60.0
N_HARMONICS = 4
TEMPLATE_JITTER = 0.03  # per-identity landmark jitter, template units

_STREAM_MIXING, _STREAM_IDENTITY, _STREAM_SAMPLE, _STREAM_PAIRS = 0, 1, 2, 3


@dataclass(frozen=True)
class DatasetSpec:
    n_identities: int = 64
    samples_per_identity: int = 80
    p_profile: float = 0.0019  # training-split profile rate (MS1MV2-like imbalance)
    noise_sigma: float = 0.05
    d_in: int = 64
    seed: int = 0
    train_fraction: float = 0.8
    test_p_profile: float = 0.5  # evaluation samples are pose balanced
    pose_gain: float = 16.0  # rms ratio of the pose term to the identity term in each observation

    def __post_init__(self):
        if self.n_identities < 2:
            raise SpecError("n_identities must be at least 2")
        if self.samples_per_identity < 2:
            raise SpecError("samples_per_identity must be at least 2")
        for name in ("p_profile", "test_p_profile"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise SpecError(f"{name} must lie in [0, 1]")
        if self.noise_sigma < 0 or not math.isfinite(self.noise_sigma):
            raise SpecError("noise_sigma must be a non-negative finite number")
        if self.d_in < 2 or self.d_in % 2:
            raise SpecError("d_in must be a positive even integer")
        if not 0 <= self.seed < 2 ** 64:
            raise SpecError("seed must fit in an unsigned 64-bit integer")
        if not (self.pose_gain >= 0 and math.isfinite(self.pose_gain)):
            raise SpecError("pose_gain must be a non-negative finite number")
        if not 0.0 < self.train_fraction <= 1.0:
            raise SpecError("train_fraction must lie in (0, 1]")

    @property
    def d_z(self) -> int:
        return self.d_in // 2

    @property
    def n_train_identities(self) -> int:
        return min(self.n_identities, max(1, round(self.train_fraction * self.n_identities)))

    @property
    def n_train_per_identity(self) -> int:
        return min(self.samples_per_identity - 1, max(1, round(self.train_fraction * self.samples_per_identity)))


@dataclass
class Sample:
    observation: np.ndarray
    landmarks: LandmarkSet
    identity: int
    yaw: float

    @property
    def is_profile(self) -> bool:
        return abs(self.yaw) > PROFILE_YAW


@dataclass
class Split:
    identity: np.ndarray  # (N,) int64
    yaw: np.ndarray  # (N,)
    landmarks: np.ndarray  # (N, 14, 2)
    observations: np.ndarray  # (N, d_in)

    def __len__(self) -> int:
        return len(self.identity)

    @property
    def is_profile(self) -> np.ndarray:
        return np.abs(self.yaw) > PROFILE_YAW

    def sample(self, i: int) -> Sample:
        lm = LandmarkSet(self.landmarks[i], float(self.yaw[i]))
        return Sample(self.observations[i].copy(), lm, int(self.identity[i]), float(self.yaw[i]))

    def subset(self, idx) -> "Split":
        idx = np.asarray(idx)
        return Split(self.identity[idx], self.yaw[idx], self.landmarks[idx], self.observations[idx])

    def equals(self, other: "Split") -> bool:
        return all(np.array_equal(getattr(self, f.name), getattr(other, f.name)) for f in fields(self))


@dataclass
class Dataset:
    spec: DatasetSpec
    train: Split
    test: Split

    @property
    def n_classes(self) -> int:
        return self.spec.n_train_identities

    def identification_mask(self) -> np.ndarray:
        """Test samples whose identity also appears in training."""
        return self.test.identity < self.spec.n_train_identities

    def verification_mask(self) -> np.ndarray:
        """Test samples of identities never seen in training."""
        return self.test.identity >= self.spec.n_train_identities

    def equals(self, other: "Dataset") -> bool:
        return self.spec == other.spec and self.train.equals(other.train) and self.test.equals(other.test)


def _rng(spec: DatasetSpec, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([spec.seed, *key]))


def pose_features(yaw) -> np.ndarray:
    a = np.radians(np.asarray(yaw, dtype=np.float64))
    k = np.arange(1, N_HARMONICS + 1)
    ang = np.multiply.outer(a, k)
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def mixing_matrices(spec: DatasetSpec) -> tuple[np.ndarray, np.ndarray]:
    """A and B scaled so each observation coordinate has unit expected variance before noise.

    ||z|| = 1 and ||phi|| = sqrt(N_HARMONICS), so unit-variance entries in A and
    variance 1/N_HARMONICS in B give both terms unit variance; ``pose_gain``
    then sets their amplitude ratio.
    """
    rng = _rng(spec, _STREAM_MIXING)
    a = 1.0 / math.sqrt(1.0 + spec.pose_gain ** 2)
    b = spec.pose_gain * a
    A = rng.normal(0.0, a, size=(spec.d_in, spec.d_z))
    B = rng.normal(0.0, b / math.sqrt(N_HARMONICS), size=(spec.d_in, 2 * N_HARMONICS))
    return A, B


def identity_factors(spec: DatasetSpec, identity: int) -> tuple[np.ndarray, np.ndarray]:
    """Latent ``z`` (unit vector) and the jittered 3-D landmark template of one identity."""
    rng = _rng(spec, _STREAM_IDENTITY, identity)
    z = rng.normal(size=spec.d_z)
    z /= np.linalg.norm(z)
    template = TEMPLATE_3D + rng.normal(0.0, TEMPLATE_JITTER, size=TEMPLATE_3D.shape)
    return z, template


def identity_latents(spec: DatasetSpec) -> np.ndarray:
    return np.stack([identity_factors(spec, k)[0] for k in range(spec.n_identities)])


def render_landmarks(spec: DatasetSpec, identity: int, yaw: float) -> np.ndarray:
    return project_template(identity_factors(spec, identity)[1], yaw, DEFAULT_FRAME)


def _draw_yaw(rng: np.random.Generator, p_profile: float) -> float:
    profile = rng.random() < p_profile
    u = rng.random()
    mag = 90.0 - 30.0 * u if profile else 60.0 * u  # (60, 90] or [0, 60)
    return mag if rng.random() < 0.5 else -mag


def generate(spec: DatasetSpec) -> Dataset:
    A, B = mixing_matrices(spec)
    n_tr_ids = spec.n_train_identities
    n_tr_per = spec.n_train_per_identity
    buckets = {"train": ([], [], [], []), "test": ([], [], [], [])}
    for k in range(spec.n_identities):
        z, template = identity_factors(spec, k)
        base = A @ z
        for j in range(spec.samples_per_identity):
            in_train = k < n_tr_ids and j < n_tr_per
            rng = _rng(spec, _STREAM_SAMPLE, k * spec.samples_per_identity + j)
            yaw = _draw_yaw(rng, spec.p_profile if in_train else spec.test_p_profile)
            noise = rng.normal(0.0, spec.noise_sigma, size=spec.d_in) if spec.noise_sigma > 0 else 0.0
            obs = base + B @ pose_features(yaw) + noise
            lms = project_template(template, yaw, DEFAULT_FRAME)
            ids, yaws, lm, ob = buckets["train" if in_train else "test"]
            ids.append(k)
            yaws.append(yaw)
            lm.append(lms)
            ob.append(obs)

    def _split(parts) -> Split:
        ids, yaws, lm, ob = parts
        return Split(np.array(ids, dtype=np.int64), np.array(yaws, dtype=np.float64),
                     np.array(lm, dtype=np.float64).reshape(-1, N_LANDMARKS, 2),
                     np.array(ob, dtype=np.float64).reshape(-1, spec.d_in))

    return Dataset(spec, _split(buckets["train"]), _split(buckets["test"]))


# ---------------------------------------------------------------------------
# verification pairs (frontal vs profile, identity-disjoint from training)
# ---------------------------------------------------------------------------

def make_pairs(dataset: Dataset, n_folds: int = 10, pairs_per_fold: int = 70) -> list[tuple[int, int, bool]]:
    """Frontal-profile pairs over held-out identities; each fold is half genuine, half impostor.

    Indices refer to positions in ``dataset.test``.  Pairs are listed fold by fold.
    """
    test = dataset.test
    ver = np.flatnonzero(dataset.verification_mask())
    if len(ver) == 0:
        return []
    frontal = {k: [] for k in np.unique(test.identity[ver])}
    profile = {k: [] for k in frontal}
    for i in ver:
        (profile if test.is_profile[i] else frontal)[test.identity[i]].append(int(i))
    usable = [k for k in frontal if frontal[k] and profile[k]]
    if len(usable) < 2:
        return []
    rng = _rng(dataset.spec, _STREAM_PAIRS)
    half = pairs_per_fold // 2
    pairs = []
    for _ in range(n_folds):
        for _ in range(half):
            k = usable[rng.integers(len(usable))]
            pairs.append((frontal[k][rng.integers(len(frontal[k]))], profile[k][rng.integers(len(profile[k]))], True))
        for _ in range(pairs_per_fold - half):
            a, b = rng.choice(len(usable), size=2, replace=False)
            ka, kb = usable[a], usable[b]
            pairs.append((frontal[ka][rng.integers(len(frontal[ka]))], profile[kb][rng.integers(len(profile[kb]))], False))
    return pairs


def write_pairs(pairs, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for a, b, genuine in pairs:
            fh.write(f"{a},{b},{'genuine' if genuine else 'impostor'}\n")


def read_pairs(path) -> list[tuple[int, int, bool]]:
    pairs = []
    offset = 0
    with open(path, "rb") as fh:
        for raw in fh:
            line = raw.decode("utf-8").strip()
            if line:
                parts = line.split(",")
                if len(parts) != 3 or parts[2] not in ("genuine", "impostor"):
                    raise FormatError(f"bad pair line {line!r}", offset)
                try:
                    pairs.append((int(parts[0]), int(parts[1]), parts[2] == "genuine"))
                except ValueError:
                    raise FormatError(f"bad pair line {line!r}", offset) from None
            offset += len(raw)
    return pairs


# ---------------------------------------------------------------------------
# binary dataset file
# ---------------------------------------------------------------------------
# header: magic, u32 n_identities, u32 samples_per_identity, f64 p_profile,
# f64 noise_sigma, u32 d_in, u64 seed, f64 train_fraction, f64 test_p_profile,
# f64 pose_gain, u32 n_train, u32 n_test; then per sample (train first, then test):
# u32 identity, f64 yaw, 28 f64 landmark coords, d_in f64 observation values.
_HEADER = "<IIddIQdddII"


def write_dataset(dataset: Dataset, path) -> None:
    s = dataset.spec
    with open(path, "wb") as fh:
        fh.write(DS_MAGIC)
        fh.write(struct.pack(_HEADER, s.n_identities, s.samples_per_identity, s.p_profile, s.noise_sigma,
                             s.d_in, s.seed, s.train_fraction, s.test_p_profile, s.pose_gain,
                             len(dataset.train), len(dataset.test)))
        for split in (dataset.train, dataset.test):
            rec = np.zeros(len(split), dtype=_record_dtype(s.d_in))
            rec["identity"] = split.identity
            rec["yaw"] = split.yaw
            rec["landmarks"] = split.landmarks.reshape(len(split), -1)
            rec["obs"] = split.observations
            fh.write(rec.tobytes())


def _record_dtype(d_in: int) -> np.dtype:
    return np.dtype([("identity", "<u4"), ("yaw", "<f8"), ("landmarks", "<f8", (2 * N_LANDMARKS,)),
                     ("obs", "<f8", (d_in,))])


def read_dataset(path) -> Dataset:
    buf = Path(path).read_bytes()
    if buf[:8] != DS_MAGIC:
        raise FormatError("bad dataset magic", 0)
    reader = _Reader(buf, 8)
    (n_id, spi, p_prof, noise, d_in, seed, frac, p_test, gain, n_train, n_test) = reader.unpack(_HEADER, "header")
    try:
        spec = DatasetSpec(n_id, spi, p_prof, noise, d_in, seed, frac, p_test, gain)
    except SpecError as exc:
        raise FormatError(f"invalid header: {exc}", 8) from None
    rdt = _record_dtype(d_in)
    splits = []
    for n in (n_train, n_test):
        start = reader.pos
        raw = reader.take(n * rdt.itemsize, f"{n} sample records")
        rec = np.frombuffer(raw, dtype=rdt)
        try:
            lms = rec["landmarks"].astype(np.float64).reshape(n, N_LANDMARKS, 2)
        except ValueError:
            raise FormatError("corrupt landmark block", start) from None
        splits.append(Split(rec["identity"].astype(np.int64), rec["yaw"].astype(np.float64), lms,
                            rec["obs"].astype(np.float64).reshape(n, d_in)))
    if reader.pos != len(buf):
        raise FormatError("trailing bytes after the last record", reader.pos)
    return Dataset(spec, *splits)


def spec_dict(spec: DatasetSpec) -> dict:
    return asdict(spec)
