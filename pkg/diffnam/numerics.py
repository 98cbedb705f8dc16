"""
Dense float64 tensors with reverse-mode automatic differentiation.

Key points:
- Tensors are immutable row-major float64 arrays.
- Ops run eagerly. When a Tape is active and any input requires gradients,
  the op records a backward closure on that tape.
- Every op checks shapes and refuses to produce NaN/Inf.
- Broadcasting is limited to scalar-tensor pairs plus the explicit
  add_bias / repeat_rows ops.
"""

import contextvars
import itertools
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import logsumexp

from .errors import ContractError, DimensionError, NonFiniteError

_node_ids = itertools.count()
_current_tape: contextvars.ContextVar = contextvars.ContextVar("current_tape", default=None)

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    __slots__ = ("_data", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        array = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(array)):
            raise NonFiniteError("tensor")
        self._init(array, requires_grad)

    def _init(self, array: np.ndarray, requires_grad: bool) -> None:
        array.setflags(write=False)
        self._data = array
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)

    @classmethod
    def _wrap(cls, array: np.ndarray, requires_grad: bool) -> "Tensor":
        tensor = cls.__new__(cls)
        tensor._init(np.ascontiguousarray(array, dtype=np.float64), requires_grad)
        return tensor

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single element, shape is {self.shape}")
        return float(self._data.reshape(-1)[0])

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


TensorLike = Union[Tensor, np.ndarray, float, int]


@dataclass
class TapeEntry:
    op: str
    inputs: Tuple[Tensor, ...]
    output_id: int
    backward: BackwardFn


class Tape:
    """Ordered record of ops; confined to the thread (context) that opened it."""

    def __init__(self):
        self.entries: List[TapeEntry] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _current_tape.set(self)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb) -> None:
        _current_tape.reset(self._token)
        self._token = None

    def record(self, entry: TapeEntry) -> None:
        self.entries.append(entry)

    def __len__(self) -> int:
        return len(self.entries)


class Gradients:
    def __init__(self, grads: Dict[int, np.ndarray]):
        self._grads = grads

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        grad = self._grads.get(tensor.node_id)
        if grad is None:
            return np.zeros(tensor.shape)
        return grad

    def __contains__(self, tensor: Tensor) -> bool:
        return tensor.node_id in self._grads


def as_tensor(value: TensorLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _emit(op: str, value: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(op)
    tape = _current_tape.get()
    record = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(value, record)
    if record:
        tape.record(TapeEntry(op, tuple(inputs), out.node_id, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.full(shape, grad.sum())


def _elementwise_pair(op: str, a: TensorLike, b: TensorLike) -> Tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(op, a.shape, b.shape)
    return a, b


# ============================================================================
# PRIMITIVE OPS
# ============================================================================

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _elementwise_pair("add", a, b)
    return _emit(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _elementwise_pair("sub", a, b)
    return _emit(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _elementwise_pair("mul", a, b)
    return _emit(
        "mul", a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError("matmul", a.shape, b.shape)
    return _emit("matmul", a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def add_bias(x: TensorLike, bias: TensorLike) -> Tensor:
    """Add a length-n vector to every row of an (m, n) matrix."""
    x, bias = as_tensor(x), as_tensor(bias)
    if x.ndim != 2 or bias.ndim != 1 or x.shape[1] != bias.shape[0]:
        raise DimensionError("add_bias", x.shape, bias.shape)
    return _emit("add_bias", x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=0)))


def conv1d(x: TensorLike, weight: TensorLike) -> Tensor:
    """Same-padded 1-D convolution over time: x (T, C_in), weight (K, C_in, C_out), K odd."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 3 or weight.shape[1] != x.shape[1]:
        raise DimensionError("conv1d", x.shape, weight.shape)
    width = weight.shape[0]
    if width % 2 == 0:
        raise ContractError(f"conv1d: kernel width must be odd, got {width}")
    pad = width // 2
    steps = x.shape[0]
    padded = np.pad(x.data, ((pad, pad), (0, 0)))
    windows = sliding_window_view(padded, width, axis=0)  # (T, C_in, K)
    value = np.einsum("tck,kco->to", windows, weight.data)

    def backward(g):
        grad_w = np.einsum("tck,to->kco", windows, g)
        grad_padded = np.zeros_like(padded)
        for k in range(width):
            grad_padded[k:k + steps] += g @ weight.data[k].T
        return grad_padded[pad:pad + steps], grad_w

    return _emit("conv1d", value, (x, weight), backward)


def softmax(x: TensorLike) -> Tensor:
    """Softmax over the last axis."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    exps = np.exp(shifted)
    probs = exps / exps.sum(axis=-1, keepdims=True)
    return _emit(
        "softmax", probs, (x,),
        lambda g: (probs * (g - (g * probs).sum(axis=-1, keepdims=True)),),
    )


def log_softmax(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    value = x.data - logsumexp(x.data, axis=-1, keepdims=True)
    probs = np.exp(value)
    return _emit(
        "log_softmax", value, (x,),
        lambda g: (g - probs * g.sum(axis=-1, keepdims=True),),
    )


def layer_norm(x: TensorLike, gamma: TensorLike, beta: TensorLike, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError("layer_norm", x.shape, gamma.shape)
    width = x.shape[1]
    centered = x.data - x.data.mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=1, keepdims=True) + eps)
    normed = centered * inv_std

    def backward(g):
        grad_normed = g * gamma.data
        grad_x = inv_std / width * (
            width * grad_normed
            - grad_normed.sum(axis=1, keepdims=True)
            - normed * (grad_normed * normed).sum(axis=1, keepdims=True)
        )
        return grad_x, (g * normed).sum(axis=0), g.sum(axis=0)

    return _emit("layer_norm", normed * gamma.data + beta.data, (x, gamma, beta), backward)


def relu(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _emit("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def abs(x: TensorLike) -> Tensor:  # noqa: A001 - mirrors the op name
    x = as_tensor(x)
    sign = np.sign(x.data)
    return _emit("abs", np.abs(x.data), (x,), lambda g: (g * sign,))


def sum(x: TensorLike) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    return _emit("sum", np.asarray(x.data.sum()), (x,), lambda g: (np.full(x.shape, float(g)),))


def mean(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    if x.size == 0:
        raise ContractError("mean of an empty tensor")
    return _emit(
        "mean", np.asarray(x.data.mean()), (x,),
        lambda g: (np.full(x.shape, float(g) / x.size),),
    )


def mse(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError("mse", a.shape, b.shape)
    diff = a.data - b.data
    scale = 2.0 / diff.size
    return _emit(
        "mse", np.asarray((diff ** 2).mean()), (a, b),
        lambda g: (float(g) * scale * diff, -float(g) * scale * diff),
    )


def transpose(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError("transpose", x.shape, ())
    return _emit("transpose", x.data.T, (x,), lambda g: (g.T,))


def concat_cols(parts: Sequence[TensorLike]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    rows = parts[0].shape[0] if parts and parts[0].ndim == 2 else -1
    for p in parts:
        if p.ndim != 2 or p.shape[0] != rows:
            raise DimensionError("concat_cols", parts[0].shape, p.shape)
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])
    return _emit(
        "concat_cols", np.concatenate([p.data for p in parts], axis=1), parts,
        lambda g: tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts))),
    )


def slice_cols(x: TensorLike, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2 or not 0 <= start < stop <= x.shape[1]:
        raise DimensionError("slice_cols", x.shape, (start, stop))

    def backward(g):
        grad = np.zeros(x.shape)
        grad[:, start:stop] = g
        return (grad,)

    return _emit("slice_cols", x.data[:, start:stop], (x,), backward)


def repeat_rows(v: TensorLike, rows: int) -> Tensor:
    """Stack a length-n vector `rows` times into a (rows, n) matrix."""
    v = as_tensor(v)
    if v.ndim != 1 or rows < 1:
        raise DimensionError("repeat_rows", v.shape, (rows,))
    return _emit("repeat_rows", np.tile(v.data, (rows, 1)), (v,), lambda g: (g.sum(axis=0),))


def cross_entropy(logits: TensorLike, targets: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of integer targets under row-wise softmax."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError("cross_entropy", logits.shape, targets.shape)
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise ContractError("cross_entropy: target id out of range")
    rows = np.arange(targets.size)
    log_probs = logits.data - logsumexp(logits.data, axis=1, keepdims=True)
    value = -log_probs[rows, targets].mean()

    def backward(g):
        grad = np.exp(log_probs)
        grad[rows, targets] -= 1.0
        return (float(g) * grad / targets.size,)

    return _emit("cross_entropy", np.asarray(value), (logits,), backward)


def custom_op(op: str, inputs: Sequence[Tensor], value: np.ndarray, backward: BackwardFn) -> Tensor:
    """Register a value computed outside this module together with its backward rule."""
    return _emit(op, np.asarray(value, dtype=np.float64), tuple(inputs), backward)


# ============================================================================
# REVERSE PASS
# ============================================================================

def backward(tape: Tape, loss: Tensor) -> Gradients:
    """Propagate d(loss)/d(node) through the tape in reverse recording order."""
    if loss.size != 1:
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    grads: Dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape)}
    for entry in reversed(tape.entries):
        grad_out = grads.get(entry.output_id)
        if grad_out is None:
            continue
        for tensor, grad in zip(entry.inputs, entry.backward(grad_out)):
            if grad is None or not tensor.requires_grad:
                continue
            grad = np.asarray(grad, dtype=np.float64).reshape(tensor.shape)
            if tensor.node_id in grads:
                grads[tensor.node_id] = grads[tensor.node_id] + grad
            else:
                grads[tensor.node_id] = grad.copy()
    return Gradients(grads)


def grad_check(function: Callable[[Tensor], Tensor], point, epsilon: float = 1e-5) -> float:
    """Max relative disagreement between tape gradients and central differences."""
    point = np.array(point, dtype=np.float64)
    with Tape() as tape:
        x = Tensor(point, requires_grad=True)
        y = function(x)
    analytic = backward(tape, y)[x]

    flat = point.reshape(-1)
    numeric = np.zeros(flat.size)
    for i in range(flat.size):
        shifted = flat.copy()
        shifted[i] = flat[i] + epsilon
        f_plus = function(Tensor(shifted.reshape(point.shape))).item()
        shifted[i] = flat[i] - epsilon
        f_minus = function(Tensor(shifted.reshape(point.shape))).item()
        numeric[i] = (f_plus - f_minus) / (2.0 * epsilon)

    if flat.size == 0:
        return 0.0
    analytic = analytic.reshape(-1)
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
