"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every primitive returns a new ``Tensor`` and, when any input requires a
gradient, records a closure mapping the output gradient to input gradients.
``backward`` walks the recorded graph once in reverse topological order.

Broadcasting is deliberately narrow: a 0-d/scalar operand, or a trailing
row vector ``(d,)`` against ``(..., d)``.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

_node_counter = itertools.count()
_grad_enabled = True


class ShapeMismatch(ValueError):
    pass


class NonScalarLoss(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_counter)
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    # -- introspection -------------------------------------------------
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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported; multiply by a constant instead")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _mismatch(op: str, a, b):
    raise ShapeMismatch(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


def _broadcast_kind(op: str, a: np.ndarray, b: np.ndarray) -> str:
    if a.shape == b.shape:
        return "same"
    if b.ndim == 0 or b.size == 1 and b.ndim <= 1:
        return "scalar_b"
    if a.ndim == 0 or a.size == 1 and a.ndim <= 1:
        return "scalar_a"
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return "row_b"
    if a.ndim == 1 and b.ndim >= 1 and b.shape[-1] == a.shape[0]:
        return "row_a"
    _mismatch(op, a.shape, b.shape)


def _reduce_to(g: np.ndarray, kind: str, target_shape: tuple, which: str) -> np.ndarray:
    if kind == "same":
        return g
    if (kind == "scalar_b" and which == "b") or (kind == "scalar_a" and which == "a"):
        return np.asarray(g.sum()).reshape(target_shape)
    if (kind == "row_b" and which == "b") or (kind == "row_a" and which == "a"):
        return g.reshape(-1, target_shape[0]).sum(axis=0)
    return g


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    kind = _broadcast_kind("add", a.data, b.data)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _reduce_to(g, kind, sa, "a"), _reduce_to(g, kind, sb, "b")

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    kind = _broadcast_kind("sub", a.data, b.data)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _reduce_to(g, kind, sa, "a"), -_reduce_to(g, kind, sb, "b")

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    kind = _broadcast_kind("mul", a.data, b.data)
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape

    def backward(g):
        ga = _reduce_to(g * bd, kind, sa, "a") if a.requires_grad else None
        gb = _reduce_to(g * ad, kind, sb, "b") if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid_np(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def softplus(a) -> Tensor:
    """log(1 + exp(a)), evaluated stably."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = _sigmoid_np(x)
    return _make(out, (a,), lambda g: (g * sig,))


def log_sigmoid(a) -> Tensor:
    return scale(softplus(scale(a, -1.0)), -1.0)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,))


def sin(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _make(np.sin(x), (a,), lambda g: (g * np.cos(x),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _make(np.cos(x), (a,), lambda g: (-g * np.sin(x),))


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _make(x * x, (a,), lambda g: (2.0 * g * x,))


# -- linear algebra / shape ---------------------------------------------------

def matmul(a, b) -> Tensor:
    """2-D ``(n,k)@(k,m)`` or batched 3-D ``(b,n,k)@(b,k,m)``."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim not in (2, 3) or ad.ndim != bd.ndim or ad.shape[-1] != bd.shape[-2] or (
        ad.ndim == 3 and ad.shape[0] != bd.shape[0]
    ):
        _mismatch("matmul", ad.shape, bd.shape)

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), backward)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as (out, in)."""
    out = matmul(x, transpose(weight))
    return add(out, bias) if bias is not None else out


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        _mismatch("transpose", a.shape, axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        _mismatch("reshape", a.shape, shape)
    src = a.shape
    return _make(out, (a,), lambda g: (g.reshape(src),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeMismatch("concat: empty input")
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            _mismatch("concat", ref, t.shape)
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(ts))
        )

    return _make(np.concatenate([t.data for t in ts], axis=ax), ts, backward)


def slice_(a, index) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data[index]
    except (IndexError, ValueError) as exc:
        raise ShapeMismatch(f"slice: index {index!r} invalid for shape {a.shape}") from exc
    out = np.array(out, dtype=np.float64)
    src = a.shape

    def backward(g):
        full = np.zeros(src)
        np.add.at(full, index, g)
        return (full,)

    return _make(out, (a,), backward)


def gather_rows(a, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    a = as_tensor(a)
    if idx.size and (idx.max() >= a.shape[0] or idx.min() < -a.shape[0]):
        raise ShapeMismatch(f"gather_rows: index out of range for shape {a.shape}")
    return slice_(a, idx)


def sum_(a, axis=None) -> Tensor:
    a = as_tensor(a)
    src = a.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, src).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), backward)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis), 1.0 / max(n, 1))


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    x = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), backward)


def layer_norm(x, gain=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply an optional affine map."""
    x = as_tensor(x)
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        return (inv * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True)),)

    out = _make(xhat, (x,), backward)
    if gain is not None:
        if as_tensor(gain).shape != (d,):
            _mismatch("layer_norm gain", x.shape, as_tensor(gain).shape)
        out = mul(out, gain)
    if bias is not None:
        out = add(out, bias)
    return out


# -- backward ------------------------------------------------------------------

def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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
    return order


def backward(loss: Tensor) -> dict:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns a mapping ``leaf -> gradient`` for this call only.
    """
    if loss.size != 1:
        raise NonScalarLoss(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    order = _topo_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    result = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            result[node] = g
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return result


# -- numerical checking ------------------------------------------------------------

def _scalarize(out: Tensor, weights: np.ndarray | None) -> Tensor:
    if out.size == 1:
        return reshape(out, ())
    return sum_(mul(out, Tensor(weights)))


_MACH_EPS = float(np.finfo(np.float64).eps)


def grad_check(f: Callable, x, eps: float = 1e-6, seed: int = 0) -> float:
    """Max relative error between autodiff and central finite differences.

    ``x`` is a tensor or a sequence of tensors; each is perturbed in place and
    restored. Non-scalar outputs are reduced with a fixed random projection.
    The error per component is ``max(|ad - fd| - r, 0) / max(|fd|, 1e-8)``,
    where ``r = 4 * machine_eps * max(|f(x+eps)|, |f(x-eps)|, 1) / eps`` bounds
    the rounding error of the central difference itself; without it a
    gradient that is exactly zero would fail against pure rounding noise.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    saved = [t.requires_grad for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = None
    out = f(*xs) if not isinstance(x, Tensor) else f(x)
    weights = None
    if out.size != 1:
        weights = np.random.default_rng(seed).normal(size=out.shape)
    backward(_scalarize(out, weights))
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in xs]

    def value() -> float:
        with no_grad():
            res = f(*xs) if not isinstance(x, Tensor) else f(x)
            return float(_scalarize(res, weights).data)

    worst = 0.0
    for t, ad in zip(xs, analytic):
        flat = t.data.reshape(-1)
        ad_flat = ad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = value()
            flat[i] = orig - eps
            fm = value()
            flat[i] = orig
            fd = (fp - fm) / (2.0 * eps)
            rounding = 4.0 * _MACH_EPS * max(abs(fp), abs(fm), 1.0) / eps
            err = max(abs(ad_flat[i] - fd) - rounding, 0.0) / max(abs(fd), 1e-8)
            worst = max(worst, err)
    for t, s in zip(xs, saved):
        t.requires_grad = s
        t.grad = None
    return worst


def zero_grads(params: Iterable[Tensor]):
    for p in params:
        p.grad = None
