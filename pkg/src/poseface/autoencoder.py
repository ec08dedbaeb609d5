"""Landmark autoencoder: heatmap stack -> unit-norm pose code -> heatmap stack.

The encoder half, once pretrained and frozen, turns landmarks into the pose
pseudo-labels that supervise the pose head during main training.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import EmptyDatasetError, FormatError, NotPretrainedError, ShapeError
from .geometry import N_LANDMARKS
from .layers import Linear, _Reader, read_layer_table, write_layer_table
from .tensor import SgdConfig, Tensor

logger = logging.getLogger(__name__)

AE_MAGIC = b"POSEAE01"
DEFAULT_LAMBDA_H = 100.0


@dataclass
class AutoEncoderModel:
    encoder: list[Linear]
    decoder: list[Linear]
    height: int
    width: int
    pretrained: bool = False

    @classmethod
    def create(cls, height: int = 32, width: int = 32, hidden: tuple[int, ...] = (512, 128),
               code_dim: int = 32, seed: int = 0, dtype=np.float64) -> "AutoEncoderModel":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xAE]))
        sizes = [N_LANDMARKS * height * width, *hidden, code_dim]
        enc = [Linear.init(rng, a, b, dtype=dtype) for a, b in zip(sizes[:-1], sizes[1:])]
        rev = sizes[::-1]
        dec = [Linear.init(rng, a, b, dtype=dtype) for a, b in zip(rev[:-1], rev[1:])]
        return cls(enc, dec, height, width)

    @property
    def input_dim(self) -> int:
        return N_LANDMARKS * self.height * self.width

    @property
    def code_dim(self) -> int:
        return self.encoder[-1].n_out

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.encoder + self.decoder for p in layer.parameters()]

    def weights_snapshot(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def freeze(self) -> None:
        """Mark as pretrained; parameters stop tracking gradients and become read-only."""
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
            p.data.setflags(write=False)
        self.pretrained = True


def encoder_forward(model: AutoEncoderModel, x: Tensor) -> Tensor:
    h = x
    for layer in model.encoder[:-1]:
        h = T.relu(layer(h))
    return T.l2_normalize(model.encoder[-1](h), axis=1)


def decoder_forward(model: AutoEncoderModel, code: Tensor) -> Tensor:
    h = code
    for layer in model.decoder[:-1]:
        h = T.relu(layer(h))
    return T.sigmoid(model.decoder[-1](h))


def _as_batch(model: AutoEncoderModel, H) -> tuple[np.ndarray, bool]:
    arr = np.asarray(H.data if isinstance(H, Tensor) else H)
    single = arr.ndim == 3 or arr.ndim == 1
    flat = arr.reshape(1, -1) if single else arr.reshape(arr.shape[0], -1)
    if flat.shape[1] != model.input_dim:
        raise ShapeError(f"heatmaps have {flat.shape[1]} values per sample, model expects {model.input_dim}")
    dtype = model.encoder[0].weight.dtype
    return flat.astype(dtype, copy=False), single


def encode(model: AutoEncoderModel, H) -> np.ndarray:
    """Unit-norm pose code(s) for one (14, h, w) stack or a batch of stacks."""
    if not model.pretrained:
        raise NotPretrainedError("encoder has not been pretrained and frozen")
    flat, single = _as_batch(model, H)
    codes = encoder_forward(model, Tensor(flat)).data
    return codes[0] if single else codes


def encode_batched(model: AutoEncoderModel, H, batch_size: int = 256) -> np.ndarray:
    arr = np.asarray(H)
    return np.concatenate([encode(model, arr[i:i + batch_size]) for i in range(0, len(arr), batch_size)])


def decode(model: AutoEncoderModel, code) -> np.ndarray:
    c = np.asarray(code.data if isinstance(code, Tensor) else code, dtype=np.float64)
    single = c.ndim == 1
    c2 = c.reshape(1, -1) if single else c
    if c2.ndim != 2 or c2.shape[1] != model.code_dim:
        raise ShapeError(f"code dimension {c2.shape[-1]} does not match model ({model.code_dim})")
    out = decoder_forward(model, Tensor(c2.astype(model.decoder[0].weight.dtype))).data
    out = out.reshape(-1, N_LANDMARKS, model.height, model.width)
    return out[0] if single else out


def ae_loss(H_i, H_o: Tensor, lambda_h: float = DEFAULT_LAMBDA_H) -> Tensor:
    """lambda_h * ||H_i o (H_i - H_o)||_F + ||(1 - H_i) o (H_i - H_o)||_F over the whole stack.

    ``H_i`` is a binary constant; gradients flow only into ``H_o``.
    """
    hi = np.asarray(H_i.data if isinstance(H_i, Tensor) else H_i, dtype=H_o.dtype)
    if hi.shape != H_o.shape:
        raise ShapeError(f"heatmap shapes differ: {hi.shape} vs {H_o.shape}")
    resid = Tensor(hi) - H_o
    pos = T.norm(Tensor(hi) * resid)
    neg = T.norm(Tensor(1.0 - hi) * resid)
    return lambda_h * pos + neg


def ae_batch_loss(H_i, H_o: Tensor, lambda_h: float = DEFAULT_LAMBDA_H) -> Tensor:
    """Batch mean of :func:`ae_loss` for (N, D) flattened stacks."""
    hi = np.asarray(H_i, dtype=H_o.dtype)
    if hi.shape != H_o.shape or hi.ndim != 2:
        raise ShapeError(f"heatmap batch shapes differ: {hi.shape} vs {H_o.shape}")
    resid = Tensor(hi) - H_o
    per = lambda_h * T.row_norms(Tensor(hi) * resid) + T.row_norms(Tensor(1.0 - hi) * resid)
    return T.mean(per)


def reconstruction_loss(model: AutoEncoderModel, H, lambda_h: float = DEFAULT_LAMBDA_H,
                        batch_size: int = 256) -> float:
    """Mean per-sample :func:`ae_loss` of ``decode(encode(H))``; works before freezing too."""
    flat, _ = _as_batch(model, H)
    total = 0.0
    for i in range(0, len(flat), batch_size):
        x = flat[i:i + batch_size]
        out = decoder_forward(model, encoder_forward(model, Tensor(x)))
        total += ae_batch_loss(x, Tensor(out.data), lambda_h).item() * len(x)
    return total / len(flat)


@dataclass
class PretrainResult:
    epoch_losses: list[float]
    holdout_initial: float
    holdout_final: float
    steps: int
    trend_ok: bool = field(init=False)

    def __post_init__(self):
        self.trend_ok = len(self.epoch_losses) < 2 or self.epoch_losses[-1] < self.epoch_losses[0]


def pretrain(model: AutoEncoderModel, heatmaps, epochs: int, sgd: SgdConfig,
             lambda_h: float = DEFAULT_LAMBDA_H, batch_size: int = 64, seed: int = 0,
             holdout=None, max_steps: int | None = None) -> PretrainResult:
    """Fit the autoencoder to flattened heatmap stacks by minimising the weighted L2 loss.

    The model is frozen on return.  ``holdout`` (defaults to the training set)
    is scored before and after training.
    """
    data = np.asarray(heatmaps)
    if data.size == 0 or len(data) == 0:
        raise EmptyDatasetError("no heatmaps to pretrain on")
    if model.pretrained:
        raise RuntimeError("model is already pretrained and frozen")
    data = data.reshape(len(data), -1)
    hold = data if holdout is None else np.asarray(holdout).reshape(-1, data.shape[1])
    dtype = model.encoder[0].weight.dtype
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xAE, 1]))
    opt = T.Sgd(model.parameters(), sgd)
    initial = reconstruction_loss(model, hold, lambda_h)
    epoch_losses: list[float] = []
    steps = 0
    for epoch in range(epochs):
        order = rng.permutation(len(data))
        running, count = 0.0, 0
        for start in range(0, len(order), batch_size):
            x = data[order[start:start + batch_size]].astype(dtype)
            opt.zero_grad()
            out = decoder_forward(model, encoder_forward(model, Tensor(x)))
            loss = ae_batch_loss(x, out, lambda_h)
            T.backward(loss)
            opt.step(epoch)
            running += loss.item() * len(x)
            count += len(x)
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        epoch_losses.append(running / count)
        logger.info("ae epoch %d loss %.4f", epoch, epoch_losses[-1])
        if max_steps is not None and steps >= max_steps:
            break
    final = reconstruction_loss(model, hold, lambda_h)
    model.freeze()
    result = PretrainResult(epoch_losses, initial, final, steps)
    if not result.trend_ok:
        logger.warning("autoencoder loss did not decrease: %s", epoch_losses)
    return result


def code_separation(codes: np.ndarray) -> float:
    """Minimum pairwise distance between codes (injectivity diagnostic)."""
    c = np.asarray(codes, dtype=np.float64)
    sq = (c * c).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * c @ c.T, 0.0)
    np.fill_diagonal(d2, np.inf)
    return float(np.sqrt(d2.min()))


# ---------------------------------------------------------------------------
# checkpoint: "POSEAE01" + layer table (encoder layers, then decoder layers)
# ---------------------------------------------------------------------------

def save_autoencoder(model: AutoEncoderModel, path) -> None:
    if not model.pretrained:
        raise NotPretrainedError("only a pretrained, frozen autoencoder can be exported")
    layers = [(l.weight.data, l.bias.data) for l in model.encoder + model.decoder]
    with open(path, "wb") as fh:
        fh.write(AE_MAGIC)
        write_layer_table(fh, layers)
    Path(path).chmod(0o444)


def load_autoencoder(path) -> AutoEncoderModel:
    """Load a frozen autoencoder.  Frames are square: side = sqrt(rows_of_first_layer / 14)."""
    buf = Path(path).read_bytes()
    if buf[:8] != AE_MAGIC:
        raise FormatError("bad autoencoder magic", 0)
    reader = _Reader(buf, 8)
    layers = read_layer_table(reader)
    if reader.pos != len(buf):
        raise FormatError("trailing bytes after layer table", reader.pos)
    if len(layers) < 2 or len(layers) % 2:
        raise FormatError("autoencoder needs an even number of layers", 8)
    half = len(layers) // 2
    d_in = layers[0][0].shape[0]
    side = int(round(np.sqrt(d_in / N_LANDMARKS)))
    if N_LANDMARKS * side * side != d_in or layers[-1][0].shape[1] != d_in:
        raise FormatError("layer shapes do not describe a square-frame autoencoder", 8)
    for (w1, _), (w2, _) in zip(layers[:-1], layers[1:]):
        if w1.shape[1] != w2.shape[0]:
            raise FormatError("consecutive layer shapes do not chain", 8)
    mk = lambda w, b: Linear(Tensor(w), Tensor(b))
    model = AutoEncoderModel([mk(*l) for l in layers[:half]], [mk(*l) for l in layers[half:]], side, side)
    model.freeze()
    return model
