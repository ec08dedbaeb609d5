"""Fully connected layers and the little-endian layer-table checkpoint format."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

from . import tensor as T
from .errors import FormatError, ShapeError
from .tensor import Tensor


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


@dataclass
class Linear:
    weight: Tensor  # (in, out); x @ weight
    bias: Tensor | None = None

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int, n_out: int, bias: bool = True,
             dtype=np.float64) -> "Linear":
        w = Tensor(glorot_uniform(rng, n_in, n_out), requires_grad=True, dtype=dtype)
        b = Tensor(np.zeros(n_out), requires_grad=True, dtype=dtype) if bias else None
        return cls(w, b)

    @property
    def n_in(self) -> int:
        return self.weight.shape[0]

    @property
    def n_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"layer expects (N, {self.n_in}) input, got {x.shape}")
        y = x @ self.weight
        return y if self.bias is None else T.add_bias(y, self.bias)

    def parameters(self) -> list[Tensor]:
        return [self.weight] if self.bias is None else [self.weight, self.bias]


# ---------------------------------------------------------------------------
# layer table: u32 count, then per layer u32 rows, u32 cols, rows*cols f64
# weights (row-major), cols f64 biases.  All little-endian.
# ---------------------------------------------------------------------------

def write_layer_table(fh: BinaryIO, layers: list[tuple[np.ndarray, np.ndarray]]) -> None:
    fh.write(struct.pack("<I", len(layers)))
    for w, b in layers:
        w = np.ascontiguousarray(w, dtype="<f8")
        b = np.ascontiguousarray(b, dtype="<f8")
        rows, cols = w.shape
        if b.shape != (cols,):
            raise ShapeError(f"bias shape {b.shape} does not match {cols} columns")
        fh.write(struct.pack("<II", rows, cols))
        fh.write(w.tobytes())
        fh.write(b.tobytes())


class _Reader:
    """Byte cursor that reports the offset of truncation."""

    def __init__(self, buf: bytes, offset: int = 0):
        self.buf = buf
        self.pos = offset

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def f64(self, count: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(8 * count, what), dtype="<f8").astype(np.float64)


def read_layer_table(reader: _Reader) -> list[tuple[np.ndarray, np.ndarray]]:
    (count,) = reader.unpack("<I", "layer count")
    layers = []
    for k in range(count):
        rows, cols = reader.unpack("<II", f"layer {k} shape")
        w = reader.f64(rows * cols, f"layer {k} weights").reshape(rows, cols)
        b = reader.f64(cols, f"layer {k} biases")
        layers.append((w, b))
    return layers
