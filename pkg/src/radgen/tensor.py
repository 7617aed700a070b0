"""Dense tensors with define-by-run reverse-mode automatic differentiation.

Every op below computes its forward value eagerly with numpy and, when
gradient recording is enabled and some input requires a gradient, records a
:class:`Node` holding a local backward rule. :func:`backward` traces the
recorded nodes reachable from a scalar loss into a :class:`Tape` (a
topologically ordered node list) and walks it once in reverse.

The op set is deliberately closed: matmul, transpose, add (with bias-row
broadcast only), mul, scale, relu, softmax_rows, layernorm, embedding,
dropout, concat_rows, concat_cols, slice_cols, sum, mean and cross_entropy.
"""

from __future__ import annotations

import contextvars
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from radgen.exceptions import ConfigError, DegenerateInputError, DimensionError, UsageError, VocabRangeError

DEFAULT_DTYPE = np.float32

_grad_enabled = contextvars.ContextVar("radgen_grad_enabled", default=True)


@contextmanager
def no_grad():
    """Disable graph recording in the current context (thread-local)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple
    output: "Tensor"
    backward_fn: Callable[[np.ndarray], tuple]


class Tensor:
    """A dense row-major array that may participate in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.kind == "f":
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor) and other.shape == self.shape:
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _make(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled.get() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, tuple(inputs), out, backward_fn)
    return out


@dataclass
class Tape:
    """Recorded ops reachable from a loss, in topological (forward) order."""

    nodes: list = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
        order = []
        visited = set()
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t._node)
                continue
            if id(t) in visited or t._node is None:
                continue
            visited.add(id(t))
            stack.append((t, True))
            for inp in t._node.inputs:
                if inp._node is not None and id(inp) not in visited:
                    stack.append((inp, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad = t.grad + g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every requires-grad ancestor."""
    if loss.size != 1 or loss.ndim > 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss is not on the tape (no input requires a gradient)")
    seed = np.ones_like(loss.data)
    if loss._node is None:
        _accumulate(loss, seed)
        return
    tape = Tape.trace(loss)
    pending = {id(loss): seed}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        _accumulate(node.output, g)
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                _accumulate(inp, gi)
            elif id(inp) in pending:
                pending[id(inp)] = pending[id(inp)] + gi
            else:
                pending[id(inp)] = gi


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim not in (2, 3) or b.ndim != a.ndim or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make(ad @ bd, "matmul", (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise DimensionError(f"transpose needs at least 2 dims, got shape {a.shape}")
    return _make(np.swapaxes(a.data, -1, -2), "transpose", (a,), lambda g: (np.swapaxes(g, -1, -2),))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias vector added to every row of ``a``."""
    a, b = as_tensor(a), as_tensor(b, dtype=a.dtype if isinstance(a, Tensor) else None)
    if a.shape == b.shape:
        return _make(a.data + b.data, "add", (a, b), lambda g: (g, g))
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        axes = tuple(range(a.ndim - 1))
        return _make(a.data + b.data, "add_bias", (a, b), lambda g: (g, g.sum(axis=axes)))
    raise DimensionError(f"add shape mismatch: {a.shape} vs {b.shape}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, s: Union[float, Tensor]) -> Tensor:
    """Multiply by a scalar; a single-element tensor scalar receives a gradient."""
    if isinstance(s, Tensor):
        if s.size != 1:
            raise DimensionError(f"scale factor must be a single element, got shape {s.shape}")
        ad, sd = a.data, s.data
        sv = sd.reshape(())

        def bw(g):
            return g * sv, np.asarray(np.sum(g * ad), dtype=sd.dtype).reshape(sd.shape)

        return _make(ad * sv, "scale", (a, s), bw)
    s = float(s)
    return _make(a.data * s, "scale", (a,), lambda g: (g * s,))


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0
    return _make(np.where(keep, x.data, 0).astype(x.dtype, copy=False), "relu", (x,), lambda g: (g * keep,))


def softmax_rows(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis; ``mask`` marks positions excluded (set to -inf).

    NaN inputs propagate to NaN outputs. A row with every position masked is
    rejected because it has no distribution to normalize.
    """
    xd = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
        if np.any(mask.all(axis=-1)):
            raise UsageError("softmax row has every position masked")
        xd = np.where(mask, -np.inf, xd)
    z = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = (e / e.sum(axis=-1, keepdims=True)).astype(x.dtype, copy=False)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, "softmax", (x,), bw)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if d < 1 or gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layernorm shape mismatch: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data
    axes = tuple(range(x.ndim - 1))

    def bw(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _make(xhat * gd + bias.data, "layernorm", (x, gain, bias), bw)


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` at integer ``ids``."""
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        bad = ids[(ids < 0) | (ids >= n)][0]
        raise VocabRangeError(f"token id {int(bad)} out of range for table with {n} rows")

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(table.data[ids], "embedding", (table,), bw)


def dropout(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout; returns ``x`` itself when not training or ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode needs an explicit random generator")
    keep = (rng.random(x.shape) >= p) * (1.0 / (1.0 - p))
    keep = keep.astype(x.dtype)
    return _make(x.data * keep, "dropout", (x,), lambda g: (g * keep,))


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    return _concat(parts, -2, "concat_rows")


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    return _concat(parts, -1, "concat_cols")


def _concat(parts, axis, op):
    parts = list(parts)
    if not parts:
        raise DimensionError(f"{op} needs at least one tensor")
    try:
        data = np.concatenate([t.data for t in parts], axis=axis)
    except (ValueError, np.exceptions.AxisError) as exc:
        raise DimensionError(f"{op} shape mismatch: {[t.shape for t in parts]}") from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in parts])

    def bw(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(data, op, parts, bw)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.shape[-1]:
        raise DimensionError(f"column slice [{start}:{stop}] out of range for shape {x.shape}")

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[..., start:stop] = g
        return (gx,)

    return _make(x.data[..., start:stop], "slice_cols", (x,), bw)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors the op name
    return _make(np.asarray(x.data.sum(), dtype=x.dtype), "sum", (x,), lambda g: (np.broadcast_to(g, x.shape),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    return _make(np.asarray(x.data.mean(), dtype=x.dtype), "mean", (x,), lambda g: (np.broadcast_to(g / n, x.shape),))


def log_softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets, ignore_index: Optional[int] = None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row-wise softmax of ``logits``.

    Rows whose target equals ``ignore_index`` do not contribute.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy shape mismatch: logits {logits.shape}, targets {targets.shape}")
    v = logits.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise VocabRangeError(f"target id out of range for vocabulary of size {v}")
    keep = np.ones(targets.shape, dtype=bool) if ignore_index is None else targets != ignore_index
    count = int(keep.sum())
    if count == 0:
        raise DegenerateInputError("cross_entropy: every target position is padding")
    logp = log_softmax_np(logits.data)
    rows = np.nonzero(keep)[0]
    loss = -logp[rows, targets[rows]].sum() / count

    def bw(g):
        grad = np.exp(logp)
        grad[rows, targets[rows]] -= 1.0
        grad[~keep] = 0.0
        return (grad * (g / count),)

    return _make(np.asarray(loss, dtype=logits.dtype), "cross_entropy", (logits,), bw)
