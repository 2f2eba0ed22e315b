"""Dense tensors with reverse-mode differentiation.

Every differentiable primitive produces a new :class:`Tensor` that remembers
its inputs and a closure computing input gradients from the output gradient.
:func:`backward` linearises that graph into a :class:`Tape` (topological
order) and accumulates gradients in reverse.

Values are float32 unless the caller builds tensors as float64, which is the
mode used for finite-difference checking. Operations keep the dtype of their
inputs.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class ShapeError(ValueError):
    """Operand shapes are incompatible with an operation."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class GradientError(RuntimeError):
    """backward() was called on something that cannot be differentiated."""


class Tensor:
    """A dense real array, optionally linked into a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE if dtype is None else dtype)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other) -> "Tensor":
        return add(self, _as_tensor(other, self.dtype))

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _result(op: str, data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    out.op = op
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return (g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None)

    return _result("matmul", A @ B, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a row vector broadcast over ``a``'s rows."""
    if a.shape == b.shape:
        def backward(g):
            return g, g
    elif a.data.ndim == 2 and b.data.ndim == 1 and b.shape[0] == a.shape[1]:
        def backward(g):
            return g, g.sum(axis=0)
    else:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    return _result("add", a.data + b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data
    return _result("mul", A * B, (a, b), lambda g: (g * B, g * A))


def scale(a: Tensor, c: float) -> Tensor:
    return _result("scale", a.data * a.data.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),))


def total(a: Tensor) -> Tensor:
    """Sum of all entries as a 0-d tensor."""
    shape = a.shape
    return _result("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {a.shape}")
    return _result("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if math.prod(shape) != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    old = a.shape
    return _result("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along ``axis``; all other dimensions must agree."""
    if not tensors:
        raise ShapeError("concat of zero tensors")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]}: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return np.split(g, bounds, axis=axis)

    return _result("concat", data, tuple(tensors), backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction."""
    if x.data.ndim != 2 or x.shape[1] < 1:
        raise ShapeError(f"softmax_rows expects a p x q matrix with q >= 1, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _result("softmax_rows", s, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalisation with biased variance, then affine ``gamma``/``beta``."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    if x.data.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"layer_norm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    X = x.data
    q = X.shape[1]
    mu = X.mean(axis=1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + X.dtype.type(eps))
    xhat = xc * inv
    G = gamma.data

    def backward(g):
        dxhat = g * G
        dx = inv / q * (q * dxhat - dxhat.sum(axis=1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _result("layer_norm", xhat * G + beta.data, (x, gamma, beta), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """``-log_softmax(logits)[label]`` for a 1-D logit vector."""
    if logits.data.ndim != 1:
        raise ShapeError(f"cross_entropy expects a 1-D logit vector, got {logits.shape}")
    C = logits.shape[0]
    if not 0 <= label < C:
        raise ValueError(f"label {label} out of range for {C} classes")
    z = logits.data - logits.data.max()
    lse = np.log(np.exp(z).sum())
    loss = lse - z[label]
    p = np.exp(z - lse)

    def backward(g):
        d = p.copy()
        d[label] -= 1
        return (d * g,)

    return _result("cross_entropy", np.asarray(loss), (logits,), backward)


def constant(data, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.array(data, dtype=dtype))


@dataclass
class Tape:
    """Primitive applications in topological order, leaves excluded."""

    entries: list[Tensor] = field(default_factory=list)

    @classmethod
    def record(cls, output: Tensor) -> "Tape":
        """Linearise the graph that produced ``output``."""
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls([t for t in order if not t.is_leaf])

    def leaves(self) -> list[Tensor]:
        found: dict[int, Tensor] = {}
        for entry in self.entries:
            for p in entry._parents:
                if p.is_leaf and p.requires_grad:
                    found.setdefault(id(p), p)
        return list(found.values())

    def __len__(self) -> int:
        return len(self.entries)


def backward(loss: Tensor, leaves: "Sequence[Tensor] | ParamStore | None" = None,
             tape: Tape | None = None, accumulate: bool = True) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to leaf tensors.

    If ``leaves`` is given, every one of them appears in the result, with a
    zero gradient when it does not influence ``loss``. Otherwise the result
    holds the leaves found on the tape. Leaf ``.grad`` fields are accumulated
    unless ``accumulate`` is false, which keeps shared leaves untouched.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("loss is detached from any tensor that requires grad")
    tape = tape if tape is not None else Tape.record(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.entries):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if leaves is None:
        targets = tape.leaves()
        if loss.is_leaf:
            targets = [loss]
    else:
        targets = list(leaves.values()) if isinstance(leaves, ParamStore) else list(leaves)
    out: dict[Tensor, np.ndarray] = {}
    for leaf in targets:
        g = grads.get(id(leaf))
        g = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
        if accumulate:
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        out[leaf] = g
    return out


class ParamStore:
    """Named trainable tensors with insertion-ordered iteration."""

    def __init__(self, items: "Mapping[str, Tensor] | None" = None):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        for name, t in (items or {}).items():
            self.add(name, t)

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, t.data.copy()) for k, t in self._params.items())

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        for name, t in self._params.items():
            arr = arrays[name]
            if arr.shape != t.shape:
                raise ShapeError(f"{name}: expected {t.shape}, got {arr.shape}")
            t.data = np.array(arr, dtype=t.dtype, order="C")

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def subset(self, prefix: str) -> "ParamStore":
        return ParamStore({k: v for k, v in self._params.items() if k.startswith(prefix)})

    def num_values(self) -> int:
        return sum(t.data.size for t in self._params.values())


def finite_difference_check(f: Callable[[ParamStore], Tensor], params: ParamStore, h: float = 1e-5,
                            analytic: "Mapping[str, np.ndarray] | None" = None) -> float:
    """Largest relative disagreement between analytic and central-difference gradients.

    ``f`` must rebuild its graph from ``params`` on every call. ``analytic``
    overrides the backward-pass gradients (used to test the checker itself).
    Parameters should be float64.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if len(params) == 0:
        return 0.0
    if analytic is None:
        params.zero_grad()
        grads = backward(f(params), params)
        analytic = {name: grads[t] for name, t in params.items()}
    worst = 0.0
    for name, t in params.items():
        a_all = np.asarray(analytic[name], dtype=np.float64).reshape(t.shape)
        flat = t.data.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            up = f(params).item()
            flat[idx] = orig - h
            down = f(params).item()
            flat[idx] = orig
            num = (up - down) / (2 * h)
            a = a_all.reshape(-1)[idx]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
