"""Dense tensors with tape-based reverse-mode autodiff, plus Adam.

Storage is float32 (switchable to float64 with :func:`precision` for gradient
checks); matmuls and reductions accumulate in float64 and round on store.

Every differentiable op appends a node to the current thread's tape.  Calling
:func:`backward` walks that tape in exact reverse order and marks it consumed;
a second call without :func:`reset_tape` raises :class:`TapeStateError`.
"""
from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import StoreError, ValidationError


class NumericError(StoreError):
    pass


class DimensionError(NumericError, ValidationError):
    pass


class DegenerateRowError(NumericError, ValidationError):
    pass


class EmptyLossError(NumericError, ValidationError):
    pass


class TapeStateError(NumericError):
    pass


class NonFiniteError(NumericError):
    pass


class UninitializedGradientError(NumericError):
    pass


_local = threading.local()


def _dtype():
    return getattr(_local, "dtype", np.float32)


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the storage dtype of newly created tensors."""
    old = _dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = old


@contextlib.contextmanager
def no_grad():
    old = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = old


class Tape:
    """Ordered record of executed ops: ``(output, inputs, backward_fn)``."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def record(self, out, inputs, fn):
        if self.consumed:
            raise TapeStateError("tape already consumed by backward(); call reset_tape() first")
        self.nodes.append((out, inputs, fn))

    def reset(self):
        self.nodes = []
        self.consumed = False

    def __len__(self):
        return len(self.nodes)


def get_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def reset_tape() -> Tape:
    tape = get_tape()
    tape.reset()
    return tape


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, _check: bool = True):
        arr = np.array(data, dtype=_dtype())
        if _check and not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self):
        return sum_all(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _emit(data: np.ndarray, inputs: Sequence[Tensor], fn: Callable, op: str, keep64: bool = False) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    # scalar reductions keep their float64 accumulator
    out.data = data if keep64 else data.astype(_dtype(), copy=False)
    out.grad = None
    out.name = None
    out.requires_grad = _grad_enabled() and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        get_tape().record(out, tuple(inputs), fn)
    return out


# -- ops ---------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad = a.data.astype(np.float64, copy=False)
    bd = b.data.astype(np.float64, copy=False)

    def back(g):
        g = g.astype(np.float64)
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _emit(ad @ bd, (a, b), back, "matmul")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}") from exc
    return _emit(out, (a, b), lambda g: (g, g), "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul shape mismatch: {a.shape} * {b.shape}") from exc

    def back(g):
        return (g * b.data if a.requires_grad else None,
                g * a.data if b.requires_grad else None)

    return _emit(out, (a, b), back, "mul")


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(dtype=np.float64))
    return _emit(out, (x,), lambda g: (np.broadcast_to(g, x.shape),), "sum", keep64=True)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from exc
    return _emit(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def slice_(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def back(g):
        full = np.zeros(x.shape, dtype=np.float64)
        if _has_advanced(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _emit(np.array(out), (x,), back, "slice")


def _has_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat shape mismatch: {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def back(g):
        return tuple(np.take(g, range(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _emit(out, tensors, back, "concat")


def masked_softmax(scores, mask) -> Tensor:
    """Softmax over the last axis; ``mask`` (bool, broadcastable) marks allowed entries.

    Blocked entries come out exactly 0.  A row with no allowed entry raises.
    """
    scores = as_tensor(scores)
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask).astype(bool)
    try:
        m = np.broadcast_to(m, scores.shape)
    except ValueError as exc:
        raise DimensionError(f"mask {m.shape} does not broadcast to scores {scores.shape}") from exc
    if not m.any(axis=-1).all():
        raise DegenerateRowError("masked_softmax: a row has no allowed position")
    s = np.where(m, scores.data.astype(np.float64), -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        g = g.astype(np.float64)
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit(p, (scores,), back, "masked_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data.astype(np.float64)
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data.astype(np.float64)

    def back(g):
        g = g.astype(np.float64)
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gbias = g.sum(axis=lead) if bias.requires_grad else None
        return gx, ggain, gbias

    return _emit(xhat * gd + bias.data, (x, gain, bias), back, "layer_norm")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    # tanh approximation
    xd = x.data.astype(np.float64)
    t = np.tanh(_GELU_C * (xd + 0.044715 * (xd * xd * xd)))

    def back(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * dt),)

    return _emit(0.5 * xd * (1.0 + t), (x,), back, "gelu")


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError("embedding table must be 2-D")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"embedding id out of range [0, {table.shape[0]})")

    flat = ids.reshape(-1)
    order = np.argsort(flat, kind="stable")
    rows, starts = np.unique(flat[order], return_index=True)

    def back(g):
        full = np.zeros(table.shape, dtype=np.float64)
        if rows.size:
            g2 = g.reshape(-1, table.shape[1]).astype(np.float64)[order]
            full[rows] = np.add.reduceat(g2, starts, axis=0)
        return (full,)

    return _emit(table.data[ids], (table,), back, "embedding")


def cross_entropy(logits: Tensor, targets, loss_positions) -> Tensor:
    """Mean token NLL over the positions flagged in ``loss_positions``.

    ``logits`` has shape ``(..., vocab)``; ``targets`` and ``loss_positions``
    match its leading shape.  Targets at non-loss positions are ignored.
    """
    logits = as_tensor(logits)
    vocab = logits.shape[-1]
    flat = logits.data.reshape(-1, vocab).astype(np.float64)
    tgt = np.asarray(targets, dtype=np.int64).reshape(-1)
    sel = np.asarray(loss_positions, dtype=bool).reshape(-1)
    if tgt.shape[0] != flat.shape[0] or sel.shape[0] != flat.shape[0]:
        raise DimensionError("targets/loss_positions do not match logits")
    rows = np.flatnonzero(sel)
    if rows.size == 0:
        raise EmptyLossError("cross_entropy: no loss positions")
    t = tgt[rows]
    if t.min() < 0 or t.max() >= vocab:
        raise DimensionError("target id out of range at a loss position")
    z = flat[rows]
    z = z - z.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1))
    nll = logz - z[np.arange(rows.size), t]
    loss = nll.mean()

    def back(g):
        probs = np.exp(z - logz[:, None])
        probs[np.arange(rows.size), t] -= 1.0
        full = np.zeros_like(flat)
        full[rows] = probs * (float(g) / rows.size)
        return (full.reshape(logits.shape),)

    return _emit(np.asarray(loss), (logits,), back, "cross_entropy", keep64=True)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    if rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(keep))


# -- backward ----------------------------------------------------------------


def backward(loss: Tensor) -> None:
    tape = get_tape()
    if tape.consumed:
        raise TapeStateError("backward() already ran on this tape; call reset_tape() first")
    if loss.size != 1:
        raise DimensionError("backward() expects a scalar loss")
    if not loss.requires_grad:
        raise TapeStateError("loss was not produced by taped ops")
    loss.grad = np.ones(loss.shape, dtype=loss.data.dtype)
    for out, inputs, fn in reversed(tape.nodes):
        if out.grad is None:
            continue
        grads = fn(out.grad)
        for inp, g in zip(inputs, grads):
            if g is None or not inp.requires_grad:
                continue
            g = _unbroadcast(np.asarray(g), inp.shape).astype(inp.data.dtype)
            inp.grad = g if inp.grad is None else inp.grad + g
    tape.consumed = True


# -- Adam --------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState, grad_masks: dict[str, np.ndarray] | None = None) -> None:
    """One bias-corrected Adam update on ``params``; zeroes their grads afterwards.

    ``grad_masks`` optionally gives, per parameter name, a 0/1 array
    broadcastable to the parameter; masked-out entries never move.
    """
    for name, p in params.items():
        if p.grad is None:
            raise UninitializedGradientError(f"parameter {name!r} has no gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = p.grad.astype(np.float64)
        if grad_masks is not None and name in grad_masks:
            g = g * grad_masks[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape, dtype=np.float64)
            state.v[name] = np.zeros(p.shape, dtype=np.float64)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data.astype(np.float64) - update).astype(p.data.dtype)
        p.grad = None


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    params = [p for p in params if p.grad is not None]
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad = (p.grad * scale).astype(p.grad.dtype)
    return total
