"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Every differentiable value in the package is a :class:`Tensor`.  Operations are
plain functions that compute a forward value with numpy and, when any input
requires gradients, attach a closure producing the vector-Jacobian product for
each input.  :func:`backward` linearises the resulting graph into a
:class:`Tape` (a topological order) and walks it once in reverse.

Float64 tensors run in *verification mode*: every leaf and every operation
output is checked for finiteness and a :class:`NumericError` is raised on the
first NaN/Inf.  Float32 tensors skip the check (training speed-up).

Broadcasting is deliberately absent.  Shapes must match exactly, except for
Python scalars (``scale``/``shift``) and the explicit ``add_bias`` op.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DegenerateError, NumericError, ShapeError

ARCCOS_EPS = 1e-7
NORM_EPS = 1e-12


def _check_finite(arr: np.ndarray, what: str) -> None:
    if arr.dtype == np.float64 and not np.isfinite(arr).all():
        raise NumericError(f"non-finite value in {what}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64) else np.float64
        arr = np.array(data, dtype=dtype, copy=True)
        _check_finite(arr, "tensor input")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple, backward: Callable, op: str) -> "Tensor":
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else shift(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else shift(self, -other)

    def __rsub__(self, other):
        return shift(neg(self), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a primitive")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis: int | None = None) -> "Tensor":
        return sum_(self, axis)

    def mean(self) -> "Tensor":
        return mean(self)

    def backward(self) -> dict:
        return backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        return g @ B.T, A.T @ g

    return Tensor._result(A @ B, (a, b), bw, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got shape {a.shape}")
    return Tensor._result(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {src} to {shape}") from None
    return Tensor._result(out, (a,), lambda g: (g.reshape(src),), "reshape")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return Tensor._result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return Tensor._result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    A, B = a.data, b.data
    return Tensor._result(A * B, (a, b), lambda g: (g * B, g * A), "mul")


def neg(a: Tensor) -> Tensor:
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._result(a.data * c, (a,), lambda g: (g * c,), "scale")


def shift(a: Tensor, c: float) -> Tensor:
    return Tensor._result(a.data + float(c), (a,), lambda g: (g,), "shift")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add vector ``b`` (k,) to every row of ``x`` (N, k)."""
    if x.ndim != 2 or b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: incompatible shapes {x.shape} + {b.shape}")
    return Tensor._result(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)), "add_bias")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._result(np.where(mask, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return Tensor._result(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return Tensor._result(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    X = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(X)
    return Tensor._result(y, (a,), lambda g: (g / X,), "log")


def cos(a: Tensor) -> Tensor:
    X = a.data
    return Tensor._result(np.cos(X), (a,), lambda g: (-g * np.sin(X),), "cos")


def arccos(a: Tensor, eps: float = ARCCOS_EPS) -> Tensor:
    """arccos with a clamped derivative.

    The forward value is exact on [-1, 1].  The derivative is evaluated at the
    argument clamped to [-1+eps, 1-eps], so it stays finite at |x| = 1.
    """
    X = a.data
    y = np.arccos(np.clip(X, -1.0, 1.0))
    Xc = np.clip(X, -1.0 + eps, 1.0 - eps)

    def bw(g):
        return (-g / np.sqrt(1.0 - Xc * Xc),)

    return Tensor._result(y, (a,), bw, "arccos")


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.shape
    if axis is None:
        return Tensor._result(np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, g, dtype=a.dtype),), "sum")
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"sum: axis {axis} out of range for shape {shape}")
    axis = axis % a.ndim

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return Tensor._result(a.data.sum(axis=axis), (a,), bw, "sum")


def mean(a: Tensor) -> Tensor:
    return scale(sum_(a), 1.0 / a.size)


def l2_normalize(x: Tensor, axis: int = 1, eps: float = NORM_EPS, exc: type = DegenerateError) -> Tensor:
    """Normalise rows (``axis=1``) or columns (``axis=0``) of a matrix to unit L2 norm."""
    if x.ndim == 1:
        axis = 0
    elif x.ndim != 2:
        raise ShapeError(f"l2_normalize needs a vector or matrix, got {x.shape}")
    X = x.data
    n = np.sqrt((X * X).sum(axis=axis, keepdims=True))
    if (n <= eps).any():
        raise exc(f"cannot normalise: norm below {eps} along axis {axis}")
    Y = X / n

    def bw(g):
        return ((g - Y * (Y * g).sum(axis=axis, keepdims=True)) / n,)

    return Tensor._result(Y, (x,), bw, "l2_normalize")


def norm(x: Tensor) -> Tensor:
    """Euclidean / Frobenius norm of the whole tensor; gradient at 0 is defined as 0."""
    X = x.data
    n = float(np.sqrt((X * X).sum()))

    def bw(g):
        if n == 0.0:
            return (np.zeros_like(X),)
        return (g * X / n,)

    return Tensor._result(np.asarray(n, dtype=x.dtype), (x,), bw, "norm")


frobenius_norm = norm


def row_norms(x: Tensor) -> Tensor:
    """Per-row Euclidean norm of an (N, k) matrix; rows with zero norm get zero gradient."""
    if x.ndim != 2:
        raise ShapeError(f"row_norms needs a matrix, got {x.shape}")
    X = x.data
    n = np.sqrt((X * X).sum(axis=1))
    safe = np.where(n > 0, n, 1.0)

    def bw(g):
        return (np.where(n[:, None] > 0, X * (g / safe)[:, None], 0.0),)

    return Tensor._result(n, (x,), bw, "row_norms")


def gather(x: Tensor, index) -> Tensor:
    """Pick ``x[i, index[i]]`` for each row, giving shape (N,)."""
    idx = np.asarray(index, dtype=np.int64)
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        raise ShapeError(f"gather: index shape {idx.shape} incompatible with {x.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise ShapeError("gather: index out of range")
    rows = np.arange(x.shape[0])
    ncols = x.shape[1]

    def bw(g):
        out = np.zeros((len(rows), ncols), dtype=g.dtype)
        out[rows, idx] = g
        return (out,)

    return Tensor._result(x.data[rows, idx], (x,), bw, "gather")


def scatter(v: Tensor, index, ncols: int) -> Tensor:
    """Inverse of :func:`gather`: an (N, ncols) zero matrix with ``v[i]`` at ``(i, index[i])``."""
    idx = np.asarray(index, dtype=np.int64)
    if v.ndim != 1 or idx.shape != v.shape:
        raise ShapeError(f"scatter: index shape {idx.shape} incompatible with {v.shape}")
    rows = np.arange(v.shape[0])
    out = np.zeros((v.shape[0], ncols), dtype=v.dtype)
    out[rows, idx] = v.data
    return Tensor._result(out, (v,), lambda g: (g[rows, idx],), "scatter")


def logsumexp(x: Tensor) -> Tensor:
    """log-sum-exp over the last axis, computed with max subtraction."""
    if x.ndim not in (1, 2):
        raise ShapeError(f"logsumexp needs a vector or matrix, got {x.shape}")
    X = x.data
    m = X.max(axis=-1, keepdims=True)
    e = np.exp(X - m)
    s = e.sum(axis=-1, keepdims=True)
    y = (m + np.log(s)).squeeze(-1)
    p = e / s

    def bw(g):
        return (p * np.expand_dims(g, -1),)

    return Tensor._result(np.asarray(y), (x,), bw, "logsumexp")


def select(mask, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise ``a`` where ``mask`` else ``b``; the mask is a constant."""
    _same_shape(a, b, "select")
    m = np.asarray(mask, dtype=bool)
    if m.shape != a.shape:
        raise ShapeError(f"select: mask shape {m.shape} vs {a.shape}")
    return Tensor._result(np.where(m, a.data, b.data), (a, b), lambda g: (g * m, g * ~m), "select")


# ---------------------------------------------------------------------------
# tape and backward pass
# ---------------------------------------------------------------------------

class Tape:
    """Topologically ordered list of the recorded nodes that lead to a loss."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, loss: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node._parents):
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, tape: Tape | None = None) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf requiring gradients.

    Returns the gradient contributed by this call for each such leaf.
    """
    if loss.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        tape = Tape.record(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            leaves[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    for leaf, g in leaves.items():
        g = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        leaves[leaf] = g
    return leaves


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

def _rel_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return np.abs(analytic - numeric) / denom


def grad_check_params(f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-6) -> float:
    """Compare analytic and central-difference gradients of ``f()`` w.r.t. ``params``.

    ``f`` closes over ``params``; their ``data`` is perturbed in place and restored.
    Returns the maximum of |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    for p in params:
        p.grad = None
    loss = f()
    backward(loss)
    worst = 0.0
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64)
        numeric = np.empty(p.size)
        flat = p.data.reshape(-1)
        for i in range(p.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f().item()
            flat[i] = orig - step
            fm = f().item()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * step)
        if not (np.isfinite(numeric).all() and np.isfinite(analytic).all()):
            raise NumericError("non-finite value during gradient check")
        if p.size:
            worst = max(worst, float(_rel_errors(analytic.reshape(-1), numeric).max()))
        p.grad = None
    return worst


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-6) -> float:
    """Max relative error between the gradient of scalar ``f(x)`` and central differences."""
    probe = Tensor(x.data, requires_grad=True)
    return grad_check_params(lambda: f(probe), [probe], step)


# ---------------------------------------------------------------------------
# SGD with momentum and a piecewise-constant schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    # (epoch, lr) drop points; lr applies from that epoch on
    schedule: tuple[tuple[int, float], ...] = ()

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        epochs = [e for e, _ in self.schedule]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValueError("schedule epochs must be strictly increasing")

    def lr_at(self, epoch: int) -> float:
        lr = self.learning_rate
        for start, value in self.schedule:
            if epoch >= start:
                lr = value
            else:
                break
        return lr


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], config: SgdConfig,
             epoch: int, velocity: dict[int, np.ndarray]) -> None:
    """One momentum-SGD update: v <- mu*v + (g + wd*p); p <- p - lr*v.

    ``velocity`` maps ``id(param)`` to its momentum buffer and is updated in place.
    """
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    lr = config.lr_at(epoch)
    for p, g in zip(params, grads):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        d = g + config.weight_decay * p.data if config.weight_decay else g
        v = velocity.get(id(p))
        v = d.copy() if v is None or config.momentum == 0 else config.momentum * v + d
        velocity[id(p)] = v
        p.data = (p.data - lr * v).astype(p.dtype, copy=False)


class Sgd:
    """Stateful wrapper around :func:`sgd_step` that reads ``param.grad``."""

    def __init__(self, params: Iterable[Tensor], config: SgdConfig):
        self.params = list(params)
        self.config = config
        self.velocity: dict[int, np.ndarray] = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, epoch: int) -> None:
        sgd_step(self.params, [p.grad for p in self.params], self.config, epoch, self.velocity)
