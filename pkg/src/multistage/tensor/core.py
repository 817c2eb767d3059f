"""Dense tensors with reverse-mode automatic differentiation.

Every op builds its output eagerly with numpy and, when any input requires a
gradient, attaches a closure mapping the output gradient to input gradients.
A :class:`Tape` is the ordered list of those op records; :func:`backward`
walks it in reverse.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _active_tapes() -> list:
    tapes = getattr(_state, "tapes", None)
    if tapes is None:
        tapes = _state.tapes = []
    return tapes


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tape:
    """Ordered op records captured while the tape is active.

    Records are appended at creation time, so the list is already in
    topological order.
    """

    def __init__(self):
        self.records: list[Tensor] = []

    def __enter__(self):
        _active_tapes().append(self)
        return self

    def __exit__(self, *exc):
        _active_tapes().remove(self)
        return False

    def __len__(self):
        return len(self.records)

    @classmethod
    def from_graph(cls, root: "Tensor") -> "Tape":
        """Rebuild a tape from the parent links reachable from ``root``."""
        tape = cls()
        seen: set[int] = set()
        on_stack: set[int] = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                on_stack.discard(id(node))
                tape.records.append(node)
                continue
            if id(node) in seen:
                if id(node) in on_stack:
                    raise RuntimeError("cycle detected in autograd graph")
                continue
            seen.add(id(node))
            on_stack.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and p._backward is not None:
                    stack.append((p, False))
        return tape


class NonScalarLossError(ValueError):
    pass


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(DEFAULT_DTYPE)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    # -- construction helpers -------------------------------------------------
    @staticmethod
    def make(data: np.ndarray, parents: Sequence["Tensor"], backward_fn: Callable, op: str) -> "Tensor":
        out = Tensor(data)
        if _grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward_fn
            out.op = op
            for tape in _active_tapes():
                tape.records.append(out)
        return out

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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        src = self.data.dtype
        return Tensor.make(self.data.astype(dtype), (self,), lambda g: (g.astype(src),), "astype")

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # -- autograd -----------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate gradients into ``.grad`` of every reachable leaf."""
        gmap = _run_backward(Tape.from_graph(self), self, grad)
        for leaf, g in gmap.values():
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g

    # -- elementwise arithmetic ----------------------------------------------
    def __add__(self, other):
        other = _wrap(other, self)
        a, b = self.shape, other.shape
        return Tensor.make(self.data + other.data, (self, other),
                           lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)), "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = _wrap(other, self)
        a, b = self.shape, other.shape
        return Tensor.make(self.data - other.data, (self, other),
                           lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)), "sub")

    def __rsub__(self, other):
        return _wrap(other, self) - self

    def __mul__(self, other):
        other = _wrap(other, self)
        x, y = self.data, other.data
        return Tensor.make(x * y, (self, other),
                           lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)), "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other, self)
        x, y = self.data, other.data
        return Tensor.make(x / y, (self, other),
                           lambda g: (_unbroadcast(g / y, x.shape),
                                      _unbroadcast(-g * x / (y * y), y.shape)), "div")

    def __rtruediv__(self, other):
        return _wrap(other, self) / self

    def __neg__(self):
        return Tensor.make(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, p: float):
        if isinstance(p, Tensor):
            raise TypeError("tensor exponents are not supported")
        x = self.data
        return Tensor.make(x ** p, (self,), lambda g: (g * p * x ** (p - 1),), "pow")

    def __matmul__(self, other):
        other = _wrap(other, self)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2:
            raise ValueError("matmul needs operands with ndim >= 2")

        def bw(g):
            ga = g @ np.swapaxes(b, -1, -2)
            gb = np.swapaxes(a, -1, -2) @ g
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

        return Tensor.make(a @ b, (self, other), bw, "matmul")

    # -- reductions -----------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor.make(np.sum(self.data, axis=axis, keepdims=keepdims), (self,), bw, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def var(self, axis=None, keepdims: bool = False):
        """Biased (population) variance."""
        mu = self.mean(axis=axis, keepdims=True)
        return ((self - mu) ** 2).mean(axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims: bool = False):
        x = self.data
        out = np.max(x, axis=axis, keepdims=True)
        mask = (x == out)
        mask = mask / mask.sum(axis=axis, keepdims=True)

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            elif axis is None and not keepdims:
                g = np.reshape(g, (1,) * x.ndim)
            return ((mask * g).astype(x.dtype),)

        res = out if keepdims else (np.squeeze(out, axis=axis) if axis is not None else out.reshape(()))
        return Tensor.make(res, (self,), bw, "max")

    # -- shape ops ------------------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        return Tensor.make(self.data.reshape(shape), (self,), lambda g: (g.reshape(src),), "reshape")

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return Tensor.make(np.transpose(self.data, axes), (self,), lambda g: (np.transpose(g, inv),), "transpose")

    @property
    def T(self):
        return self.transpose()

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(tuple(axes))

    def broadcast_to(self, shape):
        src = self.shape
        return Tensor.make(np.broadcast_to(self.data, shape).copy(), (self,),
                           lambda g: (_unbroadcast(g, src),), "broadcast_to")

    def __getitem__(self, idx):
        if isinstance(idx, Tensor):
            idx = idx.data
        x = self.data
        basic = _is_basic_index(idx)

        def bw(g):
            full = np.zeros_like(x)
            if basic:
                full[idx] += g
            else:
                np.add.at(full, idx, g)
            return (full,)

        return Tensor.make(x[idx], (self,), bw, "getitem")

    # -- unary math -----------------------------------------------------------
    def exp(self):
        y = np.exp(self.data)
        return Tensor.make(y, (self,), lambda g: (g * y,), "exp")

    def log(self):
        x = self.data
        return Tensor.make(np.log(x), (self,), lambda g: (g / x,), "log")

    def sqrt(self):
        y = np.sqrt(self.data)
        return Tensor.make(y, (self,), lambda g: (g * 0.5 / y,), "sqrt")

    def abs(self):
        x = self.data
        return Tensor.make(np.abs(x), (self,), lambda g: (g * np.sign(x),), "abs")

    def relu(self):
        x = self.data
        mask = x > 0
        return Tensor.make(np.where(mask, x, 0).astype(x.dtype), (self,), lambda g: (g * mask,), "relu")

    def sigmoid(self):
        x = self.data
        y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        y = y.astype(x.dtype)
        return Tensor.make(y, (self,), lambda g: (g * y * (1 - y),), "sigmoid")

    def tanh(self):
        y = np.tanh(self.data)
        return Tensor.make(y, (self,), lambda g: (g * (1 - y * y),), "tanh")

    def gelu(self):
        from scipy.special import erf

        x = self.data
        cdf = 0.5 * (1.0 + erf(x * 0.7071067811865476))
        pdf = np.exp(-0.5 * x * x) * 0.3989422804014327
        return Tensor.make(x * cdf, (self,), lambda g: (g * (cdf + x * pdf),), "gelu")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


def _wrap(x, like: "Tensor | None" = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if like is not None and isinstance(x, (int, float, np.floating, np.integer)):
        return Tensor(np.asarray(x, dtype=like.data.dtype))
    return Tensor(np.asarray(x))


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _run_backward(tape: Tape, loss: Tensor, seed: np.ndarray | None) -> dict[int, tuple[Tensor, np.ndarray]]:
    if seed is None:
        if loss.data.size != 1:
            raise NonScalarLossError(f"backward needs a scalar loss, got shape {loss.shape}")
        seed = np.ones_like(loss.data)
    grads: dict[int, np.ndarray] = {id(loss): seed}
    leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
    visited: set[int] = set()
    for node in reversed(tape.records):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if id(node) in visited:
            raise RuntimeError("tape record visited twice")
        visited.add(id(node))
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.data.dtype)
            if parent._backward is None:
                key = id(parent)
                if key in leaves:
                    leaves[key] = (parent, leaves[key][1] + pg)
                else:
                    leaves[key] = (parent, pg)
            else:
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
    if loss._backward is None and loss.requires_grad:
        leaves[id(loss)] = (loss, seed)
    return leaves


def backward(tape: Tape | None, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[int, np.ndarray]:
    """Gradient map ``id(param) -> gradient`` for a scalar ``loss``.

    With ``tape=None`` the tape is rebuilt from the graph. Parameters listed
    in ``params`` that did not take part in the computation get zeros.
    """
    if loss.data.size != 1:
        raise NonScalarLossError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        tape = Tape.from_graph(loss)
    leaves = _run_backward(tape, loss, None)
    out = {k: g for k, (_, g) in leaves.items()}
    if params is not None:
        for p in params:
            if id(p) not in out:
                out[id(p)] = np.zeros_like(p.data)
    return out


def grad(loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    gmap = backward(None, loss, params)
    return [gmap[id(p)] for p in params]
