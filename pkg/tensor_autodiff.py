#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Dense tensor arithmetic with define-by-run reverse-mode differentiation.

Every forward op computes its result eagerly with numpy (float64) and, when a
Tape is active on the current thread, records a backward rule. `backward`
replays the tape in reverse and returns gradients for the Parameters it finds.
"""

from __future__ import annotations

import logging
import math
import threading
from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from errors import AttentionMaskError, NumericOverflowError, ShapeMismatchError

logger = logging.getLogger(__name__)

DTYPE = np.float64
LAYER_NORM_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)

_state = threading.local()


class Tensor:
    """Dense n-dimensional float64 array with shape metadata."""

    __array_priority__ = 1000

    def __init__(self, data, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatchError("item", self.shape, (), "tensor is not a scalar")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"{type(self).__name__}(shape={self.shape}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


class Parameter(Tensor):
    """Trainable tensor; gradient always has the value's shape."""

    def __init__(self, name: str, data, decay: bool = True):
        super().__init__(np.array(data, dtype=DTYPE, copy=True), name=name)
        self.data = np.ascontiguousarray(self.data)
        self.grad = np.zeros_like(self.data)
        self.decay = decay

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


class ParameterSet:
    """Ordered, name-addressed collection of Parameters."""

    def __init__(self, parameters: Optional[Iterable[Parameter]] = None):
        self._params: "OrderedDict[str, Parameter]" = OrderedDict()
        for param in parameters or []:
            self.register(param)

    def register(self, param: Parameter) -> Parameter:
        if param.name in self._params:
            raise ValueError(f"Duplicate parameter name '{param.name}'")
        self._params[param.name] = param
        return param

    def add(self, name: str, data, decay: bool = True) -> Parameter:
        return self.register(Parameter(name, data, decay=decay))

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def get(self, name: str) -> Optional[Parameter]:
        return self._params.get(name)

    def names(self) -> List[str]:
        return list(self._params)

    def values(self) -> List[Parameter]:
        return list(self._params.values())

    def items(self):
        return self._params.items()

    def with_prefix(self, prefix: str) -> List[Parameter]:
        return [p for name, p in self._params.items() if name.startswith(prefix)]

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {name: p.shape for name, p in self._params.items()}

    def num_values(self) -> int:
        return int(sum(p.size for p in self._params.values()))

    def zero_grad(self) -> None:
        for param in self._params.values():
            param.zero_grad()

    def state_arrays(self) -> Dict[str, np.ndarray]:
        """Copies of every parameter value, keyed by name."""
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        """Overwrite parameter values in place; names and shapes must match exactly."""
        missing = [name for name in self._params if name not in arrays]
        extra = [name for name in arrays if name not in self._params]
        if missing or extra:
            raise ShapeMismatchError(
                "load_arrays", (len(self._params),), (len(arrays),),
                f"missing={missing} unexpected={extra}",
            )
        for name, param in self._params.items():
            value = np.asarray(arrays[name], dtype=DTYPE)
            if value.shape != param.shape:
                raise ShapeMismatchError("load_arrays", param.shape, value.shape, f"parameter '{name}'")
            param.data[...] = value


@dataclass
class TapeEntry:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of executed operations for one forward pass.

    Use as a context manager; ops executed inside the block on the same
    thread are recorded. Tapes nest, and `no_grad()` suspends recording.
    """

    def __init__(self):
        self.entries: List[TapeEntry] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, backward_fn) -> None:
        self.entries.append(TapeEntry(op, inputs, output, backward_fn))


def _tape_stack() -> List[Optional[Tape]]:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = []
        _state.stack = stack
    return stack


def active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad():
    """Suspend tape recording on this thread."""
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _emit(op: str, inputs: Tuple[Tensor, ...], out_data: np.ndarray, backward_fn) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        raise NumericOverflowError(f"{op} produced non-finite values (output shape {out_data.shape})")
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None:
        tape.record(op, inputs, out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum `grad` over the axes that broadcasting expanded from `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(op, a.shape, b.shape, "not broadcast-compatible") from None


# ---------------------------------------------------------------------------
# Elementwise and linear algebra
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", (a, b), a.data + b.data, _backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("sub", (a, b), a.data - b.data, _backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)

    def _backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit("mul", (a, b), a.data * b.data, _backward)


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes; leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError("matmul", a.shape, b.shape, "operands need at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError("matmul", a.shape, b.shape, "inner dimensions differ")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeMismatchError("matmul", a.shape, b.shape, "batch dimensions differ") from None

    def _backward(g):
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _emit("matmul", (a, b), np.matmul(a.data, b.data), _backward)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    s = expit(x.data)

    def _backward(g):
        return (g * s * (1.0 - s),)

    return _emit("sigmoid", (x,), s, _backward)


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    t = np.tanh(x.data)

    def _backward(g):
        return (g * (1.0 - t * t),)

    return _emit("tanh", (x,), t, _backward)


def gelu(x) -> Tensor:
    """GELU, tanh formulation."""
    x = _as_tensor(x)
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v ** 3)
    t = np.tanh(inner)

    def _backward(g):
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * d_inner),)

    return _emit("gelu", (x,), 0.5 * v * (1.0 + t), _backward)


def clip(x, low: float, high: float) -> Tensor:
    """Clamp into [low, high]; gradient flows only where the input was inside."""
    x = _as_tensor(x)
    inside = (x.data >= low) & (x.data <= high)

    def _backward(g):
        return (g * inside,)

    return _emit("clip", (x,), np.clip(x.data, low, high), _backward)


def softmax(x, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis with max-subtraction.

    `mask` (broadcastable to x, truthy = keep) gives excluded positions
    exactly zero weight; every row needs at least one kept position.
    """
    x = _as_tensor(x)
    z = x.data
    if mask is not None:
        keep = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not np.all(keep.any(axis=-1)):
            raise AttentionMaskError("softmax row has every position masked")
        z = np.where(keep, z, -np.inf)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def _backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", (x,), s, _backward)


def layer_norm(x, gain, bias, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis with population variance, then scale and shift."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeMismatchError("layer_norm", x.shape, gain.shape, "gain/bias must match last axis")
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std

    def _backward(g):
        g_hat = g * gain.data
        grad_x = inv_std * (
            g_hat
            - g_hat.mean(axis=-1, keepdims=True)
            - x_hat * (g_hat * x_hat).mean(axis=-1, keepdims=True)
        )
        return grad_x, _unbroadcast(g * x_hat, gain.shape), _unbroadcast(g, bias.shape)

    return _emit("layer_norm", (x, gain, bias), x_hat * gain.data + bias.data, _backward)


def embedding(table, ids: np.ndarray) -> Tensor:
    """Row lookup `table[ids]`; ids are integer indices."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeMismatchError("embedding", table.shape, ids.shape, "table must be 2-D")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeMismatchError("embedding", table.shape, ids.shape, "token id out of range")

    def _backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids, g)
        return (grad,)

    return _emit("embedding", (table,), table.data[ids], _backward)


# ---------------------------------------------------------------------------
# Shape and reduction ops
# ---------------------------------------------------------------------------

def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeMismatchError("reshape", x.shape, tuple(shape)) from None

    def _backward(g):
        return (g.reshape(x.shape),)

    return _emit("reshape", (x,), out, _backward)


def transpose(x, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))

    def _backward(g):
        return (g.transpose(inverse),)

    return _emit("transpose", (x,), x.data.transpose(axes), _backward)


def select(x, index: int, axis: int) -> Tensor:
    """Pick one position along `axis`, dropping that axis (e.g. CLS pooling)."""
    x = _as_tensor(x)
    axis = axis % x.ndim
    if not -x.shape[axis] <= index < x.shape[axis]:
        raise ShapeMismatchError("select", x.shape, (index,), f"index out of range on axis {axis}")
    slicer = [slice(None)] * x.ndim
    slicer[axis] = index
    slicer = tuple(slicer)

    def _backward(g):
        grad = np.zeros_like(x.data)
        grad[slicer] = g
        return (grad,)

    return _emit("select", (x,), x.data[slicer], _backward)


def reduce_sum(x, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum", (x,), np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), _backward)


def reduce_mean(x, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    count = x.size if axis is None else x.shape[axis]

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _emit("mean", (x,), np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), _backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    parts = tuple(_as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeMismatchError("concat", parts[0].shape, parts[-1].shape) from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def _backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", parts, out, _backward)


def dropout(x, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity when rate is 0 or no generator is supplied."""
    x = _as_tensor(x)
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def _backward(g):
        return (g * keep,)

    return _emit("dropout", (x,), x.data * keep, _backward)


def cross_entropy(logits, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of (batch, classes) logits against integer labels."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatchError("cross_entropy", logits.shape, labels.shape)
    batch = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(batch)
    loss = -log_probs[rows, labels].mean()

    def _backward(g):
        grad = np.exp(log_probs)
        grad[rows, labels] -= 1.0
        return (grad * (g / batch),)

    return _emit("cross_entropy", (logits,), np.asarray(loss), _backward)


# ---------------------------------------------------------------------------
# Reverse pass and gradient checking
# ---------------------------------------------------------------------------

def backward(tape: Tape, loss: Tensor, params: Iterable[Parameter] = ()) -> Dict[str, np.ndarray]:
    """Replay `tape` in reverse from the scalar `loss`.

    Sets `.grad` on every Parameter reachable from the loss and on every
    Parameter in `params` (zeros when unreachable). Returns name -> gradient.
    """
    if loss.data.size != 1:
        raise ShapeMismatchError("backward", loss.shape, (), "loss must be a scalar")
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    reached: Dict[int, Parameter] = {}

    for entry in reversed(tape.entries):
        upstream = grads.pop(id(entry.output), None)
        if upstream is None:
            continue
        for tensor, grad in zip(entry.inputs, entry.backward(upstream)):
            if grad is None:
                continue
            key = id(tensor)
            grads[key] = grads[key] + grad if key in grads else grad
            if isinstance(tensor, Parameter):
                reached[key] = tensor

    result: Dict[str, np.ndarray] = {}
    for param in list(reached.values()) + [p for p in params if id(p) not in reached]:
        grad = grads.get(id(param))
        param.grad = np.array(grad, dtype=DTYPE).reshape(param.shape) if grad is not None else np.zeros_like(param.data)
        result[param.name] = param.grad
    return result


def _evaluate_scalar(f: Callable[[], Tensor]) -> float:
    try:
        with no_grad():
            value = f()
    except NumericOverflowError:
        return math.nan
    return float(np.asarray(value.data).reshape(-1)[0])


def check_gradient(
    f: Callable[[], Tensor],
    params: Iterable[Parameter],
    step: float = 1e-4,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Compare analytic gradients against central finite differences.

    Returns the max over checked entries of
    |analytic - numeric| / max(1, |analytic|, |numeric|). `max_entries`
    samples that many entries per parameter. Non-finite evaluations return
    `inf` instead of raising.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = list(params)
    try:
        with Tape() as tape:
            loss = f()
        analytic = backward(tape, loss, params)
    except NumericOverflowError as exc:
        logger.warning("Gradient check aborted: %s", exc)
        return math.inf
    analytic = {name: grad.copy() for name, grad in analytic.items()}

    rng = np.random.default_rng(seed)
    worst = 0.0
    for param in params:
        flat = param.data.reshape(-1)
        flat_grad = analytic[param.name].reshape(-1)
        if max_entries is not None and flat.size > max_entries:
            indices = rng.choice(flat.size, size=max_entries, replace=False)
        else:
            indices = range(flat.size)
        for i in indices:
            original = flat[i]
            try:
                flat[i] = original + step
                plus = _evaluate_scalar(f)
                flat[i] = original - step
                minus = _evaluate_scalar(f)
            finally:
                flat[i] = original
            numeric = (plus - minus) / (2.0 * step)
            if not math.isfinite(numeric):
                logger.warning("Non-finite finite difference at %s[%d]", param.name, i)
                return math.inf
            a = float(flat_grad[i])
            error = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if error > worst:
                worst = error
                logger.debug("New worst gradient entry %s[%d]: analytic=%r numeric=%r", param.name, i, a, numeric)
    return worst


__all__ = [
    "Tensor", "Parameter", "ParameterSet", "Tape", "TapeEntry", "no_grad", "active_tape",
    "add", "sub", "mul", "matmul", "sigmoid", "tanh", "gelu", "clip", "softmax", "layer_norm",
    "embedding", "reshape", "transpose", "select", "reduce_sum", "reduce_mean", "concat",
    "dropout", "cross_entropy", "backward", "check_gradient",
]
