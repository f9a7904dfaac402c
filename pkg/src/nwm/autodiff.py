"""Dense tensors with a reverse-mode tape and a multiply-add counter.

Ops compute eagerly with numpy. When a :class:`Tape` is active, every op
whose inputs track gradients appends a node to it, and every ``matmul``
adds its multiply-adds to the tape's counter (whether or not it records).
Without an active tape the ops are plain numpy calls.

    with Tape() as tape:
        loss = (x * x).sum()
    tape.backward(loss)
"""
from __future__ import annotations

import contextlib
import threading
from collections import Counter
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "NonFiniteError", "active_tape", "flop_scope",
    "precision", "get_default_dtype", "set_default_dtype", "no_record",
    "matmul", "add", "sub", "mul", "concat", "softmax", "layer_norm",
    "attention", "gelu", "silu", "mse", "tensor",
]


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf from its inputs."""


_local = threading.local()


def _tapes() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
        _local.scopes = []
        _local.dtype = np.dtype(np.float32)
    return _local.tapes


def _scopes() -> list:
    _tapes()
    return _local.scopes


def get_default_dtype() -> np.dtype:
    _tapes()
    return _local.dtype


def set_default_dtype(dtype) -> None:
    _tapes()
    _local.dtype = np.dtype(dtype)


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for newly created tensors."""
    old = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


def active_tape() -> "Tape | None":
    tapes = _tapes()
    return tapes[-1] if tapes else None


@contextlib.contextmanager
def flop_scope(name: str) -> Iterator[None]:
    """Label multiply-adds counted inside the block (labels nest with '/')."""
    scopes = _scopes()
    scopes.append(name)
    try:
        yield
    finally:
        scopes.pop()


@contextlib.contextmanager
def no_record() -> Iterator[None]:
    """Keep counting flops on the active tape but stop recording nodes."""
    tape = active_tape()
    if tape is None:
        yield
        return
    old = tape.record
    tape.record = False
    try:
        yield
    finally:
        tape.record = old


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Records ops in execution order and counts matmul multiply-adds."""

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[_Node] = []
        self.flops = 0
        self.flops_by_scope: Counter = Counter()
        self._spent = False

    def __enter__(self) -> "Tape":
        _tapes().append(self)
        return self

    def __exit__(self, *exc) -> None:
        tapes = _tapes()
        assert tapes and tapes[-1] is self
        tapes.pop()

    def count(self, n: int) -> None:
        n = int(n)
        self.flops += n
        self.flops_by_scope["/".join(_scopes())] += n

    def reset(self) -> None:
        self.nodes.clear()
        self.flops = 0
        self.flops_by_scope.clear()
        self._spent = False

    def backward(self, loss: "Tensor") -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf."""
        if self._spent:
            raise RuntimeError("backward already ran on this tape; call reset() first")
        if loss.data.size != 1:
            raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
        self._spent = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if inp._node is None:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = grads[key]
            leaf.grad = g if leaf.grad is None else leaf.grad + g


class Tensor:
    """An n-d array of reals that may take part in reverse-mode autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
                dtype = data.dtype
            else:
                dtype = get_default_dtype()
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: mul(self, -1.0)
    __truediv__ = lambda self, o: mul(self, 1.0 / o)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes if axes else None)

    def swapaxes(self, a: int, b: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype if dtype is not None else get_default_dtype())


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced a non-finite value")


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data, dtype=data.dtype)
    tape = active_tape()
    if tape is not None and tape.record and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = _Node(out, tuple(inputs), backward)
        tape.nodes.append(out._node)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# --- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = x.data
    c = np.sqrt(2.0 / np.pi).astype(xd.dtype)
    inner = c * (xd + 0.044715 * xd ** 3)
    th = np.tanh(inner)
    out = 0.5 * xd * (1.0 + th)

    def backward(g):
        dinner = c * (1.0 + 3 * 0.044715 * xd ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th ** 2) * dinner),)

    return _make(out, (x,), backward, "gelu")


def silu(x: Tensor) -> Tensor:
    xd = x.data
    sig = 1.0 / (1.0 + np.exp(-xd))
    return _make(xd * sig, (x,), lambda g: (g * sig * (1.0 + xd * (1.0 - sig)),), "silu")


# --- shape ---------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (g.transpose(inv),), "transpose")


def getitem(x: Tensor, idx) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return _make(np.ascontiguousarray(x.data[idx]), (x,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


# --- reductions ------------------------------------------------------------

def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis, keepdims), 1.0 / count)


def mse(pred: Tensor, target) -> Tensor:
    """Mean of squared differences over every element."""
    target = _as_tensor(target, pred)
    diff = pred.data - target.data
    n = diff.size
    out = np.asarray((diff * diff).sum() / n, dtype=pred.dtype)

    def backward(g):
        gd = g * (2.0 / n) * diff
        return gd, -gd

    return _make(out, (pred, target), backward, "mse")


# --- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; counts batch*i*j*k multiply-adds on the tape."""
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise ValueError(f"matmul batch dims do not broadcast: {a.shape} @ {b.shape}") from exc
    i, k = a.shape[-2:]
    j = b.shape[-1]
    tape = active_tape()
    if tape is not None:
        tape.count(int(np.prod(batch, dtype=np.int64)) * i * j * k)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), backward, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    xd = x.data
    z = np.exp(xd - xd.max(axis=axis, keepdims=True))
    y = z / z.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), backward, "softmax")


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply optional gain and bias."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    d = xd.shape[-1]

    def backward(g):
        gx = g
        if gain is not None:
            gx = g * gain.data
        gx = rstd * (gx - gx.mean(axis=-1, keepdims=True)
                     - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        if gain is not None:
            grads.append(_unbroadcast(g * xhat, gain.shape))
        if bias is not None:
            grads.append(_unbroadcast(g, bias.shape))
        return tuple(grads)

    out = xhat
    inputs = [x]
    if gain is not None:
        out = out * gain.data
        inputs.append(gain)
    if bias is not None:
        out = out + bias.data
        inputs.append(bias)
    assert d > 0
    return _make(out, inputs, backward, "layer_norm")


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Scaled dot-product attention split over ``heads``.

    q is (..., Lq, d); k and v are (..., Lk, d). The two matmuls cost
    Lq*Lk*d multiply-adds each per batch element.
    """
    *batch, lq, d = q.shape
    lk = k.shape[-2]
    if k.shape[-1] != d or v.shape[-1] != d or v.shape[-2] != lk:
        raise ValueError(f"attention shape mismatch: q{q.shape} k{k.shape} v{v.shape}")
    if d % heads:
        raise ValueError(f"dim {d} not divisible by {heads} heads")
    dh = d // heads
    nb = len(batch)

    def split(t, length):
        t = t.reshape(*batch, length, heads, dh)
        return t.transpose(*range(nb), nb + 1, nb, nb + 2)

    qh, kh, vh = split(q, lq), split(k, lk), split(v, lk)
    scores = matmul(qh, kh.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
    out = matmul(softmax(scores, axis=-1), vh)
    out = out.transpose(*range(nb), nb + 1, nb, nb + 2)
    return out.reshape(*batch, lq, d)
