"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations on :class:`Tensor` are recorded only while a :class:`Tape` is
active and at least one operand is being tracked, so inference code pays for
nothing but the numpy call. Typical use::

    with Tape() as tape:
        loss = ((x @ w) - y).square().mean()
    grads = tape.gradient(loss, [w])
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_ACTIVE: list["Tape"] = []


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value produced by {op}")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # sum out the axes numpy broadcasting added or stretched
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "tracked", "name")
    __array_priority__ = 100

    def __init__(self, data, tracked: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.tracked = tracked
        self.name = name

    @property
    def shape(self) -> tuple:
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
        return float(self.data.item())

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # arithmetic -----------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    # method sugar -----------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims: bool = False):
        return reduce_max(self, axis, keepdims)

    def square(self):
        return mul(self, self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass
class Node:
    op: str
    out: Tensor
    parents: tuple
    vjp: Callable[[np.ndarray], tuple]


@dataclass
class Tape:
    """Ordered op record; parents always precede children."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]

    def gradient(self, loss: Tensor, params: Sequence[Tensor], seed=None) -> list[np.ndarray]:
        if not self.nodes:
            raise RuntimeError("backward on empty tape")
        if seed is None:
            if loss.size != 1:
                raise ShapeError("gradient seed required for non-scalar output")
            seed = np.ones_like(loss.data)
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(seed, dtype=DTYPE)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not parent.tracked:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        out = []
        for p in params:
            g = grads.get(id(p))
            if g is None:
                g = np.zeros_like(p.data)
            _finite(g, "backward")
            out.append(g)
        return out


def _record(op: str, data: np.ndarray, parents: tuple, vjp) -> Tensor:
    _finite(data, op)
    if _ACTIVE and any(p.tracked for p in parents):
        out = Tensor(data, tracked=True)
        _ACTIVE[-1].nodes.append(Node(op, out, parents, vjp))
        return out
    return Tensor(data)


# primitives ----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _record("div", out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _record("matmul", a.data @ b.data, (a, b),
                   lambda g: (g @ b.data.T, a.data.T @ g))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    return _record("pow", a.data ** exponent, (a,),
                   lambda g: (g * exponent * a.data ** (exponent - 1),))


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _record("sin", np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _record("cos", np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _record("log", out, (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _record("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    return _record("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    return _record("relu", np.maximum(a.data, 0.0), (a,),
                   lambda g: (g * (a.data > 0.0),))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data > lo) & (a.data < hi)
    return _record("clip", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", out, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(reduce_sum(a, axis, keepdims), 1.0 / count)


def reduce_max(a, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; the gradient goes to the first arg-max only."""
    a = as_tensor(a)
    out = a.data.max(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            mask = np.zeros(a.size)
            mask[np.argmax(a.data)] = 1.0
            return (mask.reshape(a.shape) * g,)
        idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
        mask = np.zeros(a.shape)
        np.put_along_axis(mask, idx, 1.0, axis=axis)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (mask * gg,)

    return _record("max", out, (a,), vjp)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    return _record("broadcast", np.broadcast_to(a.data, shape).copy(), (a,),
                   lambda g: (_unbroadcast(g, a.shape),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _record("transpose", a.data.T, (a,), lambda g: (g.T,))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        full = np.zeros(a.shape)
        np.add.at(full, index, g)
        return (full,)

    return _record("getitem", a.data[index], (a,), vjp)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _record("concat", np.concatenate([t.data for t in ts], axis=axis), ts,
                   lambda g: tuple(np.split(g, sizes, axis=axis)))


# gradient checking ----------------------------------------------------------

def numerical_gradient(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-5,
                       indices: Iterable[int] | None = None) -> np.ndarray:
    """Central differences of a scalar ``fn`` w.r.t. ``param`` (flat indices)."""
    flat = param.data.reshape(-1)
    grad = np.zeros_like(flat)
    idx = range(flat.size) if indices is None else indices
    original = param.data
    for i in idx:
        plus = flat.copy()
        plus[i] += h
        param.data = plus.reshape(original.shape)
        fp = fn().item()
        minus = flat.copy()
        minus[i] -= h
        param.data = minus.reshape(original.shape)
        fm = fn().item()
        grad[i] = (fp - fm) / (2 * h)
    param.data = original
    return grad.reshape(original.shape)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b)) / scale)


# optimizer ------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr, betas[0], betas[1], eps,
                               m=[np.zeros_like(p.data) for p in self.params],
                               v=[np.zeros_like(p.data) for p in self.params])

    def step(self, grads: Sequence[np.ndarray]) -> None:
        s = self.state
        if len(grads) != len(self.params):
            raise ShapeError("one gradient per parameter required")
        for g, p in zip(grads, self.params):
            if g.shape != p.shape:
                raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            _finite(g, "optimizer_step")
        s.step += 1
        c1 = 1.0 - s.beta1 ** s.step
        c2 = 1.0 - s.beta2 ** s.step
        for i, (g, p) in enumerate(zip(grads, self.params)):
            s.m[i] = s.beta1 * s.m[i] + (1.0 - s.beta1) * g
            s.v[i] = s.beta2 * s.v[i] + (1.0 - s.beta2) * g * g
            update = s.lr * (s.m[i] / c1) / (np.sqrt(s.v[i] / c2) + s.eps)
            p.data = p.data - update


# checkpoint -----------------------------------------------------------------

MAGIC = b"NSAD"
VERSION = 1


def encode_arrays(arrays: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, value in arrays.items():
        arr = np.asarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_arrays(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise ValueError("not an NSAD checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}
    while pos < len(blob):
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}Q", blob, pos)
        pos += 8 * rank
        count = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(dims).astype(DTYPE)
        pos += 8 * count
    return out


def save_checkpoint(path: str | Path, arrays: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_arrays(arrays))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    return decode_arrays(Path(path).read_bytes())
