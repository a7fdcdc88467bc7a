"""Dense float64 tensors with a reverse-mode tape.

Every differentiable op returns a new :class:`Tensor` whose ``_backward``
closure maps the upstream gradient to one gradient per parent.  Calling
:func:`backward` on a scalar walks the recorded graph once in reverse
topological order, accumulates ``.grad`` on leaf tensors that require it and
then drops the graph.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class EmptySupportError(ValueError):
    """A masked softmax row has no valid position."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return hadamard(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, index):
        return getitem(self, index)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _record(data: np.ndarray, parents: tuple[Tensor, ...], backward: BackwardFn, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_check(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add",
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub",
    )


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "hadamard")
    ad, bd = a.data, b.data
    return _record(
        ad * bd, (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "hadamard",
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _record(a.data * c, (a,), lambda g: (g * c,), "scale")


def sigmoid(a: Tensor) -> Tensor:
    # split form avoids overflow in exp for large |x|
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def elementwise(kind: str, *args: Tensor) -> Tensor:
    """Dispatch by name: ``add``, ``hadamard``, ``sigmoid`` or ``tanh``."""
    table = {"add": add, "hadamard": hadamard, "sigmoid": sigmoid, "tanh": tanh}
    try:
        fn = table[kind]
    except KeyError:
        raise ContractError(f"unknown elementwise kind {kind!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading axes broadcast like :func:`numpy.matmul`."""
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _record(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for weight stored as (out, in).

    ``x`` may be a single vector or carry any number of leading batch axes.
    """
    if weight.data.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        if bias.shape != (wd.shape[0],):
            raise DimensionError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data
        parents = (x, weight, bias)
    else:
        parents = (x, weight)

    def backward(g):
        gx = g @ wd
        g2 = g.reshape(-1, g.shape[-1])
        x2 = xd.reshape(-1, xd.shape[-1])
        gw = g2.T @ x2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _record(out, parents, backward, "linear")


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    datas = [p.data for p in parts]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[p.shape for p in parts]}: {exc}") from None
    ax = axis % out.ndim
    bounds = np.cumsum([d.shape[ax] for d in datas])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _record(out, tuple(parts), backward, "concat")


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    datas = [p.data for p in parts]
    try:
        out = np.stack(datas, axis=axis)
    except ValueError as exc:
        raise DimensionError(f"stack: {[p.shape for p in parts]}: {exc}") from None
    ax = axis % out.ndim

    def backward(g):
        return tuple(np.moveaxis(g, ax, 0))

    return _record(out, tuple(parts), backward, "stack")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


class ScatterGrad:
    """Gradient touching only ``index`` of the parent; materialized lazily.

    Lets many slices of one tensor share a single dense accumulator instead
    of each allocating a full-size zero array.
    """

    __slots__ = ("index", "values", "basic")

    def __init__(self, index, values: np.ndarray, basic: bool = False):
        self.index = index
        self.values = values
        self.basic = basic

    def add_into(self, out: np.ndarray) -> None:
        if self.basic:
            out[self.index] += self.values
        else:
            np.add.at(out, self.index, self.values)


def getitem(a: Tensor, index) -> Tensor:

    if not isinstance(index, tuple):
        index = (index,)
    basic = all(isinstance(i, (int, slice)) or i is None or i is Ellipsis for i in index)
    return _record(a.data[index], (a,), lambda g: (ScatterGrad(index, g, basic),), "getitem")


def take_rows(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; gradient scatters back into the rows used."""
    idx = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"row id out of range for table with {n} rows")

    width = table.shape[1]
    return _record(
        table.data[idx], (table,),
        lambda g: (ScatterGrad(idx.reshape(-1), g.reshape(-1, width)),), "take_rows",
    )


def total(a: Tensor) -> Tensor:
    """Sum of all entries as a scalar tensor."""
    src = a.shape
    return _record(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, src).copy(),), "sum")


def sum_axis(a: Tensor, axis: int) -> Tensor:
    src = a.shape
    ax = axis % a.data.ndim
    return _record(
        a.data.sum(axis=ax), (a,),
        lambda g: (np.broadcast_to(np.expand_dims(g, ax), src).copy(),), "sum_axis",
    )


# ---------------------------------------------------------------------------
# softmax family


def softmax_masked(logits: Tensor, valid) -> Tensor:
    """Softmax over the last axis restricted to ``valid`` positions.

    Masked positions come out as exact zeros and receive exact zero gradient.
    """
    mask = np.asarray(valid, dtype=bool)
    if mask.shape != logits.shape:
        mask = np.broadcast_to(mask, logits.shape)
    if not mask.any(axis=-1).all():
        raise EmptySupportError("softmax_masked: every position of a row is masked")
    x = np.where(mask, logits.data, -np.inf)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(x), 0.0)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _record(out, (logits,), backward, "softmax_masked")


def log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    s = x - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, target, weights=None) -> Tensor:
    """Summed negative log-likelihood of ``target`` under ``softmax(logits)``.

    ``logits`` is (V,) with an integer target, or (B, V) with a (B,) target.
    Optional per-row ``weights`` (e.g. 0 for padding) multiply each row's term.
    """
    v = logits.shape[-1]
    tgt = np.asarray(target, dtype=np.int64)
    if np.any(tgt < 0) or np.any(tgt >= v):
        raise IndexError(f"cross_entropy: target {target!r} outside [0, {v})")
    lsm = log_softmax(logits.data)
    if logits.data.ndim == 1:
        if tgt.ndim != 0:
            raise DimensionError("cross_entropy: vector logits need a scalar target")
        w = np.asarray(1.0 if weights is None else weights, dtype=DTYPE)
        loss = -lsm[tgt] * w

        def backward(g):
            grad = np.exp(lsm)
            grad[tgt] -= 1.0
            return (grad * (g * w),)

        return _record(np.asarray(loss), (logits,), backward, "cross_entropy")

    if tgt.shape != logits.shape[:-1]:
        raise DimensionError(f"cross_entropy: targets {tgt.shape} vs logits {logits.shape}")
    w = np.ones(tgt.shape, dtype=DTYPE) if weights is None else np.asarray(weights, dtype=DTYPE)
    rows = np.arange(tgt.size)
    picked = lsm.reshape(-1, v)[rows, tgt.reshape(-1)].reshape(tgt.shape)
    loss = -(picked * w).sum()

    def backward(g):
        grad = np.exp(lsm).reshape(-1, v)
        grad[rows, tgt.reshape(-1)] -= 1.0
        grad *= (w.reshape(-1, 1) * g)
        return (grad.reshape(logits.shape),)

    return _record(np.asarray(loss), (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# dropout


def dropout_apply(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _record(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------------------
# reverse pass


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every leaf that requires grad."""
    if root.data.size != 1 or root.data.ndim > 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))

    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape, dtype=DTYPE)}
    owned: set[int] = set()  # buffers safe to update in place
    for node in reversed(order):
        key = id(node)
        g = grads.pop(key, None)
        owned.discard(key)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            pkey = id(p)
            if pkey not in owned:
                if isinstance(pg, ScatterGrad):
                    buf = np.zeros(p.shape, dtype=DTYPE)
                    if pkey in grads:
                        buf += grads[pkey]
                    pg.add_into(buf)
                    grads[pkey] = buf
                    owned.add(pkey)
                elif pkey in grads:
                    grads[pkey] = grads[pkey] + pg
                    owned.add(pkey)
                else:
                    grads[pkey] = pg
            elif isinstance(pg, ScatterGrad):
                pg.add_into(grads[pkey])
            else:
                grads[pkey] += pg
        node._parents = ()
        node._backward = None
        node.requires_grad = False


# ---------------------------------------------------------------------------
# parameters, init and the optimizer


@dataclass
class Parameter:
    name: str
    value: Tensor
    fan_in: int
    trainable: bool = True
    is_bias: bool = False

    def __post_init__(self):
        if self.fan_in < 1:
            raise ContractError(f"{self.name}: fan_in must be >= 1")
        self.value.requires_grad = self.trainable

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.value.grad

    def freeze(self) -> None:
        self.trainable = False
        self.value.requires_grad = False
        self.value.grad = None


def init_bound(fan_in: int) -> float:
    return math.sqrt(3.0 / fan_in)


def uniform_init(param: Parameter, rng: np.random.Generator) -> None:
    """Fill with U[-sqrt(3/d), +sqrt(3/d)], d = fan_in (variance 1/d)."""
    bound = init_bound(param.fan_in)
    param.value.data = rng.uniform(-bound, bound, size=param.value.shape)


def global_grad_norm(params: Iterable[Parameter]) -> float:
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float(np.dot(p.grad.ravel(), p.grad.ravel()))
    return math.sqrt(sq)


def clip_global_norm(params: Iterable[Parameter], max_norm: float) -> float:
    """Rescale all grads so their joint L2 norm is at most ``max_norm``.

    Returns the factor applied (1.0 when nothing was clipped).
    """
    if not max_norm > 0:
        raise ContractError(f"max_norm must be positive, got {max_norm}")
    params = list(params)
    norm = global_grad_norm(params)
    if norm <= max_norm or math.isinf(max_norm):
        return 1.0
    factor = max_norm / norm
    for p in params:
        if p.grad is not None:
            p.value.grad = p.grad * factor
    return factor


def sgd_step(params: Iterable[Parameter], lr: float, weight_decay: float = 0.0) -> None:
    """w <- w - lr * (grad + weight_decay * w), then zero the grads."""
    if not lr > 0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    if weight_decay < 0:
        raise ContractError(f"weight decay must be >= 0, got {weight_decay}")
    for p in params:
        if not p.trainable:
            continue
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if weight_decay:
            g = g + weight_decay * p.data
        p.value.data = p.data - lr * g
        p.value.grad = None


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.value.grad = None


# ---------------------------------------------------------------------------
# seeded streams

STREAMS = {"init": 0, "dropout": 1, "shuffle": 2, "sampling": 3, "split": 4, "data": 5}


def make_rng(seed: int, purpose: str) -> np.random.Generator:
    """PCG64 stream for one purpose, derived from the root seed via SeedSequence.

    Streams for different purposes are statistically independent, so adding a
    draw to one never shifts another.
    """
    try:
        key = STREAMS[purpose]
    except KeyError:
        raise ContractError(f"unknown rng purpose {purpose!r}") from None
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), key])))


@dataclass
class RngStreams:
    seed: int
    streams: dict[str, np.random.Generator] = field(default_factory=dict)

    def __post_init__(self):
        for name in STREAMS:
            self.streams.setdefault(name, make_rng(self.seed, name))

    def __getitem__(self, purpose: str) -> np.random.Generator:
        return self.streams[purpose]

    def state(self) -> dict:
        return {name: g.bit_generator.state for name, g in self.streams.items()}

    def restore(self, state: dict) -> None:
        for name, st in state.items():
            self.streams[name].bit_generator.state = st
