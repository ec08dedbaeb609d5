"""Landmark sets, binary heatmap synthesis, least-squares affine alignment and
the pose-adaptive margin ratio."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence, TextIO

import numpy as np

from .errors import DegenerateError, FormatError, OutOfFrameError, ShapeError

N_LANDMARKS = 14
DEFAULT_FRAME = 108.0

# Stand-in 3-D template for the 14 selected landmarks: x right, y down, z towards
# the camera, head rotation centre at the origin.  Not a reconstruction of any
# published index set.
LANDMARK_NAMES = (
    "brow_left", "brow_right",
    "eye_left_outer", "eye_left_inner", "eye_right_inner", "eye_right_outer",
    "nose_bridge", "nose_tip", "nostril_left", "nostril_right",
    "mouth_left", "mouth_centre", "mouth_right", "chin",
)
TEMPLATE_3D = np.array([
    [-0.50, -0.62, 0.55], [0.50, -0.62, 0.55],
    [-0.68, -0.36, 0.35], [-0.24, -0.34, 0.52], [0.24, -0.34, 0.52], [0.68, -0.36, 0.35],
    [0.00, -0.32, 0.70], [0.00, 0.12, 1.00], [-0.18, 0.22, 0.78], [0.18, 0.22, 0.78],
    [-0.36, 0.52, 0.58], [0.00, 0.50, 0.70], [0.36, 0.52, 0.58], [0.00, 0.92, 0.55],
])
# pixels per template unit and frame centre, in a DEFAULT_FRAME-sized image
TEMPLATE_SCALE = 40.0


def project_template(points_3d: np.ndarray, yaw: float, frame: float = DEFAULT_FRAME) -> np.ndarray:
    """Rotate 3-D points about the vertical axis by ``yaw`` degrees and project orthographically."""
    a = math.radians(yaw)
    x = points_3d[:, 0] * math.cos(a) + points_3d[:, 2] * math.sin(a)
    y = points_3d[:, 1]
    scale = TEMPLATE_SCALE * frame / DEFAULT_FRAME
    c = frame / 2.0
    return np.stack([c + scale * x, c + scale * y], axis=1)


# frontal 2-D projection used as the alignment target
CANONICAL_2D = project_template(TEMPLATE_3D, 0.0)


@dataclass
class LandmarkSet:
    points: np.ndarray  # (14, 2) pixel coordinates in [0, frame)^2
    yaw: float
    pitch: float = 0.0
    roll: float = 0.0
    frame: float = DEFAULT_FRAME

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.shape != (N_LANDMARKS, 2):
            raise ShapeError(f"expected {N_LANDMARKS} (x, y) points, got shape {self.points.shape}")
        if not (np.all(self.points >= 0) and np.all(self.points < self.frame)):
            raise OutOfFrameError(f"landmarks outside the [0, {self.frame}) frame")
        if not -90.0 <= self.yaw <= 90.0:
            raise ValueError(f"yaw {self.yaw} outside [-90, 90]")

    def flat(self) -> np.ndarray:
        return self.points.reshape(-1).copy()


# ---------------------------------------------------------------------------
# heatmaps
# ---------------------------------------------------------------------------

def _round_half_up(v):
    return np.floor(np.asarray(v) + 0.5).astype(np.int64)


def _disc_offsets(radius: float) -> np.ndarray:
    r = int(math.floor(radius))
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    keep = dx * dx + dy * dy <= radius * radius
    return np.stack([dy[keep], dx[keep]], axis=1)


def landmark_pixels(points: np.ndarray, frame: float, height: int, width: int) -> np.ndarray:
    """Pixel (row, col) of each landmark after scaling into an ``height`` x ``width`` grid."""
    cols = _round_half_up(np.asarray(points)[:, 0] * (width / frame))
    rows = _round_half_up(np.asarray(points)[:, 1] * (height / frame))
    bad = (rows < 0) | (rows >= height) | (cols < 0) | (cols >= width)
    if bad.any():
        raise OutOfFrameError(f"landmark {int(np.argmax(bad))} falls outside the {height}x{width} frame")
    return np.stack([rows, cols], axis=1)


def render_heatmaps(lm: LandmarkSet, height: int, width: int, radius: float = 1.0,
                    dtype=np.float64) -> np.ndarray:
    """Binary (14, height, width) stack: 1 within Euclidean ``radius`` of each landmark pixel."""
    if height <= 0 or width <= 0 or radius < 0:
        raise ValueError("height/width must be positive and radius non-negative")
    pix = landmark_pixels(lm.points, lm.frame, height, width)
    offs = _disc_offsets(radius)
    out = np.zeros((N_LANDMARKS, height, width), dtype=dtype)
    for k, (r, c) in enumerate(pix):
        rr = r + offs[:, 0]
        cc = c + offs[:, 1]
        ok = (rr >= 0) & (rr < height) & (cc >= 0) & (cc < width)
        out[k, rr[ok], cc[ok]] = 1
    return out


def render_heatmap_batch(points: np.ndarray, frame: float, height: int, width: int,
                         radius: float = 1.0) -> np.ndarray:
    """Render (N, 14, 2) landmark arrays into a flat (N, 14*height*width) uint8 matrix."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    out = np.zeros((n, N_LANDMARKS, height, width), dtype=np.uint8)
    offs = _disc_offsets(radius)
    for i in range(n):
        pix = landmark_pixels(points[i], frame, height, width)
        rr = pix[:, 0:1] + offs[None, :, 0]
        cc = pix[:, 1:2] + offs[None, :, 1]
        kk = np.broadcast_to(np.arange(N_LANDMARKS)[:, None], rr.shape)
        ok = (rr >= 0) & (rr < height) & (cc >= 0) & (cc < width)
        out[i, kk[ok], rr[ok], cc[ok]] = 1
    return out.reshape(n, -1)


# ---------------------------------------------------------------------------
# affine alignment
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AffineTransform:
    matrix: np.ndarray = field(default_factory=lambda: np.array([[1.0, 0, 0], [0, 1.0, 0]]))

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (2, 3):
            raise ShapeError(f"affine matrix must be 2x3, got {m.shape}")
        object.__setattr__(self, "matrix", m)

    @property
    def linear(self) -> np.ndarray:
        return self.matrix[:, :2]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:, 2]

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.array([[1.0, 0, 0], [0, 1.0, 0]]))

    @classmethod
    def translate(cls, tx: float, ty: float) -> "AffineTransform":
        return cls(np.array([[1.0, 0, tx], [0, 1.0, ty]]))


def apply_affine(t: AffineTransform, points) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    return p @ t.linear.T + t.translation


def compose(outer: AffineTransform, inner: AffineTransform) -> AffineTransform:
    """Transform equivalent to applying ``inner`` first, then ``outer``."""
    a = np.vstack([outer.matrix, [0, 0, 1]])
    b = np.vstack([inner.matrix, [0, 0, 1]])
    return AffineTransform((a @ b)[:2])


def estimate_affine(src, dst) -> AffineTransform:
    """Least-squares affine map from ``src`` to ``dst`` via the 6x6 normal equations."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.ndim != 2 or src.shape[1] != 2 or src.shape != dst.shape:
        raise ShapeError(f"need two equal-length (n, 2) point arrays, got {src.shape} and {dst.shape}")
    if len(src) < 3:
        raise DegenerateError("at least three correspondences are required")
    centred = src - src.mean(axis=0)
    sv = np.linalg.svd(centred, compute_uv=False)
    if sv[-1] <= 1e-9 * max(1.0, sv[0]):
        raise DegenerateError("source points are collinear")
    n = len(src)
    design = np.zeros((2 * n, 6))
    design[0::2, 0:2] = src
    design[0::2, 2] = 1.0
    design[1::2, 3:5] = src
    design[1::2, 5] = 1.0
    rhs = dst.reshape(-1)
    params = np.linalg.solve(design.T @ design, design.T @ rhs)
    t = AffineTransform(params.reshape(2, 3))
    if abs(np.linalg.det(t.linear)) <= 1e-9:
        raise DegenerateError("estimated transform is singular")
    return t


def affine_residual(t: AffineTransform, src, dst) -> float:
    """Sum of squared alignment errors."""
    d = apply_affine(t, src) - np.asarray(dst, dtype=np.float64)
    return float((d * d).sum())


def align_to_template(lm: LandmarkSet, template: np.ndarray = CANONICAL_2D) -> tuple[LandmarkSet, AffineTransform]:
    t = estimate_affine(lm.points, template)
    pts = np.clip(apply_affine(t, lm.points), 0.0, np.nextafter(lm.frame, 0))
    return LandmarkSet(pts, lm.yaw, lm.pitch, lm.roll, lm.frame), t


# ---------------------------------------------------------------------------
# pose
# ---------------------------------------------------------------------------

def adaptive_ratio(yaw) -> float | np.ndarray:
    """Extra-margin ratio min(|yaw|, 90) / 90.  Pitch and roll are ignored."""
    r = np.minimum(np.abs(np.asarray(yaw, dtype=np.float64)), 90.0) / 90.0
    return float(r) if r.ndim == 0 else r


def estimate_yaw_heuristic(lm: LandmarkSet) -> float:
    """Rough yaw from the horizontal nose-tip offset relative to the eye span.

    Diagnostic only: it is calibrated for the built-in template and is not used
    anywhere in training or evaluation (synthetic data carries exact yaw).
    """
    p = lm.points
    eyes = p[[2, 3, 4, 5]]
    centre = eyes[:, 0].mean()
    span = max(eyes[:, 0].max() - eyes[:, 0].min(), 1e-9)
    ratio = (p[7, 0] - centre) / span
    return float(np.clip(np.degrees(np.arcsin(np.clip(2.0 * ratio, -1.0, 1.0))), -90.0, 90.0))


# ---------------------------------------------------------------------------
# landmark text format
# ---------------------------------------------------------------------------

def format_landmark_line(sample_id: int, identity: int, lm: LandmarkSet) -> str:
    vals = [str(int(sample_id)), str(int(identity)), repr(float(lm.yaw)), repr(float(lm.pitch)),
            repr(float(lm.roll))] + [repr(float(v)) for v in lm.points.reshape(-1)]
    return ",".join(vals)


def parse_landmark_line(line: str, frame: float = DEFAULT_FRAME) -> tuple[int, int, LandmarkSet]:
    parts = line.strip().split(",")
    if len(parts) != 5 + 2 * N_LANDMARKS:
        raise FormatError(f"expected {5 + 2 * N_LANDMARKS} fields, got {len(parts)}")
    try:
        sample_id, identity = int(parts[0]), int(parts[1])
        yaw, pitch, roll = (float(v) for v in parts[2:5])
        pts = np.array([float(v) for v in parts[5:]]).reshape(N_LANDMARKS, 2)
    except ValueError as exc:
        raise FormatError(f"unparseable landmark line: {exc}") from None
    return sample_id, identity, LandmarkSet(pts, yaw, pitch, roll, frame)


def write_landmarks(fh: TextIO, records: Iterable[tuple[int, int, LandmarkSet]]) -> None:
    for sid, ident, lm in records:
        fh.write(format_landmark_line(sid, ident, lm) + "\n")


def read_landmarks(fh: TextIO, frame: float = DEFAULT_FRAME) -> Iterator[tuple[int, int, LandmarkSet]]:
    offset = 0
    for line in fh:
        if line.strip():
            try:
                yield parse_landmark_line(line, frame)
            except FormatError as exc:
                raise FormatError(str(exc), offset) from None
        offset += len(line.encode("utf-8"))
