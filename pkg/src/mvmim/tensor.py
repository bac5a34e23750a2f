"""Dense n-d tensors with a reverse-mode gradient tape.

Every op computes its forward value with numpy and, when any input is tracked,
records a closure mapping the output gradient to input gradients. Nodes get a
monotonically increasing id at creation, so sorting reachable nodes by id is a
topological order and accumulation order never depends on traversal details.

Broadcasting in binary ops is limited to leading dimensions: the smaller
operand's shape must be a suffix of the larger one (or a scalar). Anything else
needs an explicit ``broadcast_to``.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, DomainError, GradientError

DTYPE = np.float64

_ids = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording anything on the tape."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class DiffTensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward", "_tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids)
        self._parents: tuple[DiffTensor, ...] = ()
        self._backward = None
        self._tape = None
        self.name = name

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
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "DiffTensor":
        return DiffTensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"DiffTensor(shape={self.shape}{tag})"

    # -- operators -----------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(x) -> DiffTensor:
    return x if isinstance(x, DiffTensor) else DiffTensor(x)


def parameter(data, name: str | None = None) -> DiffTensor:
    return DiffTensor(data, requires_grad=True, name=name)


def _make(data: np.ndarray, parents: Sequence[DiffTensor], backward_fn) -> DiffTensor:
    out = DiffTensor.__new__(DiffTensor)
    out.data = data
    out.grad = None
    out.node_id = next(_ids)
    out._tape = None
    out.name = None
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_suffix(a: np.ndarray, b: np.ndarray, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or a.ndim == 0 or b.ndim == 0:
        return
    small, big = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if big[len(big) - len(small):] != small:
        raise DimensionError(f"{op}: shapes {sa} and {sb} are not leading-dimension broadcastable")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)))


def mul(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a.data, b.data, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _reduce_to(g * bd, ad.shape) if a.requires_grad else None
        gb = _reduce_to(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), bw)


def div(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a.data, b.data, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = _reduce_to(g / bd, ad.shape) if a.requires_grad else None
        gb = _reduce_to(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw)


def square(x) -> DiffTensor:
    x = as_tensor(x)
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * xd * g,))


def sqrt(x) -> DiffTensor:
    x = as_tensor(x)
    if np.any(x.data < 0):
        idx = tuple(int(i) for i in np.argwhere(x.data < 0)[0])
        raise DomainError(f"sqrt of negative value at index {idx}")
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,))


def exp(x) -> DiffTensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x) -> DiffTensor:
    x = as_tensor(x)
    bad = x.data <= 0
    if np.any(bad):
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise DomainError(f"log of non-positive value {x.data[idx]!r} at index {idx}")
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def sigmoid(x) -> DiffTensor:
    x = as_tensor(x)
    xd = x.data
    # split by sign so exp never overflows
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    e = np.exp(xd[~pos])
    out[~pos] = e / (1.0 + e)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x) -> DiffTensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + _GELU_A * x2))
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        d = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
        return (g * d,)

    return _make(out, (x,), bw)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "sigmoid": sigmoid,
    "log": log,
    "gelu": gelu,
    "square": square,
    "sqrt": sqrt,
    "exp": exp,
}


def elementwise(kind: str, *args) -> DiffTensor:
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}") from None
    return fn(*args)


def where(cond: np.ndarray, a, b) -> DiffTensor:
    """``cond ? a : b`` with a, b of the same shape as ``cond``."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    if not (a.shape == b.shape == cond.shape):
        raise DimensionError(f"where: shapes {cond.shape}, {a.shape}, {b.shape} must agree")
    return _make(np.where(cond, a.data, b.data), (a, b), lambda g: (np.where(cond, g, 0.0), np.where(cond, 0.0, g)))


# ---------------------------------------------------------------------------
# linear algebra and reductions
# ---------------------------------------------------------------------------


def matmul(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul batch dimensions incompatible: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _reduce_to(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _reduce_to(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _make(out, (a, b), bw)


def tsum(x, axis=None, keepdims: bool = False) -> DiffTensor:
    x = as_tensor(x)
    shape = x.shape
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (x,), bw)


def mean(x, axis=None, keepdims: bool = False) -> DiffTensor:
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[i] for i in axes]))
    return tsum(x, axis, keepdims) * (1.0 / count)


def softmax(x, axis: int = -1) -> DiffTensor:
    x = as_tensor(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, (x,), bw)


def layer_norm(x, gain, bias, eps: float = 1e-6) -> DiffTensor:
    """Normalize over the last axis, then apply ``gain`` and ``bias`` (both shape ``(d,)``)."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gain.shape}, {bias.shape} do not match last dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def bw(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            dxhat = g * gd
            gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, d).sum(axis=0)
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), bw)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(x, shape) -> DiffTensor:
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes) -> DiffTensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def broadcast_to(x, shape) -> DiffTensor:
    x = as_tensor(x)
    old = x.shape
    return _make(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_reduce_to(g, old),))


def _has_int_array(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    for it in items:
        if isinstance(it, (list, np.ndarray)) and np.asarray(it).dtype != bool:
            return True
    return False


def getitem(x, idx) -> DiffTensor:
    x = as_tensor(x)
    shape = x.shape
    scatter_add = _has_int_array(idx)

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        if scatter_add:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _make(np.array(x.data[idx], dtype=DTYPE), (x,), bw)


def concat(xs: Sequence, axis: int = 0) -> DiffTensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(xs: Sequence, axis: int = 0) -> DiffTensor:
    xs = [as_tensor(x) for x in xs]
    n = len(xs)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _make(np.stack([x.data for x in xs], axis=axis), xs, bw)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------


class GradientTape:
    """Reverse-topological replay of every node reachable from a scalar output."""

    def __init__(self, output: DiffTensor, nodes: list[DiffTensor]):
        self.output = output
        self.nodes = nodes
        self.consumed = False

    @classmethod
    def record(cls, output: DiffTensor) -> "GradientTape":
        seen: dict[int, DiffTensor] = {}
        stack_ = [output]
        while stack_:
            node = stack_.pop()
            if node.node_id in seen or not node.requires_grad:
                continue
            seen[node.node_id] = node
            stack_.extend(node._parents)
        nodes = [seen[k] for k in sorted(seen, reverse=True)]
        return cls(output, nodes)

    @property
    def leaves(self) -> list[DiffTensor]:
        return [n for n in self.nodes if n.is_leaf]

    def backward(self) -> None:
        if self.consumed:
            raise GradientError("backward already ran on this tape; call reset() first")
        self.consumed = True
        grads: dict[int, np.ndarray] = {self.output.node_id: np.ones(self.output.shape, dtype=DTYPE)}
        for node in self.nodes:
            g = grads.pop(node.node_id, None)
            if g is None:
                continue
            if node.is_leaf:
                if node.grad is None:
                    node.grad = np.array(g, dtype=DTYPE)
                else:
                    node.grad = node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent.node_id)
                grads[parent.node_id] = pg if prev is None else prev + pg

    def reset(self) -> None:
        """Zero leaf grads and allow another backward pass."""
        for leaf in self.leaves:
            leaf.grad = None
        self.consumed = False


def backward(scalar: DiffTensor) -> GradientTape:
    """Populate ``.grad`` on every tracked leaf feeding ``scalar``."""
    if scalar.size != 1:
        raise GradientError(f"backward needs a scalar output, got shape {scalar.shape}")
    if scalar._tape is not None and scalar._tape.consumed:
        raise GradientError("backward already ran for this output; reset its tape first")
    if not scalar.requires_grad:
        raise GradientError("output does not depend on any tracked tensor")
    tape = GradientTape.record(scalar)
    scalar._tape = tape
    tape.backward()
    return tape


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


def _sample_coords(params: Sequence[DiffTensor], max_coords: int | None, rng: np.random.Generator):
    sizes = [p.size for p in params]
    total = sum(sizes)
    if max_coords is None or total <= max_coords:
        return [(i, j) for i, n in enumerate(sizes) for j in range(n)]
    # one coordinate per tensor first, remainder uniformly over everything
    picks = {(i, int(rng.integers(n))) for i, n in enumerate(sizes)}
    offsets = np.cumsum([0] + sizes)
    while len(picks) < max(max_coords, len(params)):
        flat = int(rng.integers(total))
        i = int(np.searchsorted(offsets, flat, side="right") - 1)
        picks.add((i, flat - int(offsets[i])))
    return sorted(picks)


def finite_difference_check(
    f: Callable[[], DiffTensor],
    params: Sequence[DiffTensor],
    h: float = 1e-5,
    max_coords: int | None = 256,
    rng: np.random.Generator | None = None,
    return_details: bool = False,
):
    """Max relative error between tape gradients and central differences.

    ``f`` rebuilds the scalar from the current parameter values on every call.
    At most ``max_coords`` coordinates are probed (every tensor gets at least one).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    rng = np.random.default_rng(0) if rng is None else rng
    for p in params:
        p.grad = None
    backward(f())
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    details = []
    with no_grad():
        for i, j in _sample_coords(params, max_coords, rng):
            data = params[i].data
            k = np.unravel_index(j, data.shape)
            orig = data[k]
            data[k] = orig + h
            fp = f().item()
            data[k] = orig - h
            fm = f().item()
            data[k] = orig
            num = (fp - fm) / (2.0 * h)
            ana = float(analytic[i].reshape(-1)[j])
            err = abs(ana - num) / (abs(ana) + abs(num) + 1e-12)
            worst = max(worst, err)
            if return_details:
                details.append((i, j, ana, num, err))
    for p in params:
        p.grad = None
    return (worst, details) if return_details else worst


def zero_grads(params: Iterable[DiffTensor]) -> None:
    for p in params:
        p.grad = None
