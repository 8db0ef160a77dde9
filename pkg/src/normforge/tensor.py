"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable operation creates a new :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to parent gradients. Node ids
come from a global counter, so sorting reachable nodes by id is a valid
topological order for the backward sweep.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from collections.abc import Callable, Iterator, Mapping
from typing import Any, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ParameterSet",
    "ShapeError",
    "NonFiniteError",
    "as_tensor",
    "no_grad",
    "strict_mode",
    "is_grad_enabled",
    "backward",
    "grad",
    "finite_diff_grad",
    "global_norm",
    "clip_by_global_norm",
    "forward_primitive",
    "PRIMITIVES",
]

_ids = itertools.count()
_grad_enabled = True
_strict = False


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def strict_mode(enabled: bool = True) -> Iterator[None]:
    """Reject NaN/inf inputs to every primitive while active.

    ``-inf`` is still accepted where it is meaningful (softmax and loss
    inputs, which receive masked logits).
    """
    global _strict
    prev = _strict
    _strict = enabled
    try:
        yield
    finally:
        _strict = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_id")

    def __init__(self, data: Any, requires_grad: bool = False, *, op: str = "leaf",
                 _parents: tuple[Tensor, ...] = (), _backward: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = _parents
        self._backward = _backward
        self._id = next(_ids)

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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_non_scalar(self)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed: np.ndarray | None = None) -> None:
        backward(self, seed)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return scale(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)

    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
    def transpose(self, axes=None): return transpose(self, axes)


def _raise_non_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check(kind: str, *arrays: np.ndarray, allow_neginf: bool = False) -> None:
    for a in arrays:
        if allow_neginf:
            bad = np.isnan(a).any() or np.isposinf(a).any()
        else:
            bad = not np.isfinite(a).all()
        if bad:
            raise NonFiniteError(f"{kind}: non-finite input under strict mode")


def _make(data: np.ndarray, parents: tuple[Tensor, ...], bwd: Callable, op: str) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, op=op, _parents=parents, _backward=bwd)
    return Tensor(data, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    if _strict:
        _check("add", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    if _strict:
        _check("sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    if _strict:
        _check("mul", a.data, b.data)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    if _strict:
        _check("div", a.data, b.data)
    ad, bd = a.data, b.data
    out = ad / bd

    def bwd(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return _make(out, (a, b), bwd, "div")


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    if _strict:
        _check("scale", x.data)
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def relu(x) -> Tensor:
    x = as_tensor(x)
    if _strict:
        _check("relu", x.data)
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


def exp(x) -> Tensor:
    x = as_tensor(x)
    if _strict:
        _check("exp", x.data)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    if _strict:
        _check("log", x.data)
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    if _strict:
        _check("sqrt", x.data)
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def masked_fill(x, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is True by ``value`` (no gradient flows there)."""
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    try:
        full = np.broadcast_to(mask, x.shape)
    except ValueError:
        raise ShapeError(f"masked_fill: mask shape {mask.shape} not broadcastable to {x.shape}") from None
    if _strict:
        _check("masked_fill", x.data)
    keep = ~full
    return _make(np.where(full, value, x.data), (x,), lambda g: (g * keep,), "masked_fill")


def dropout(x, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; the sampled mask is stored so backward is exact for it.

    ``rng=None`` (evaluation mode) or ``p == 0`` returns ``x`` unchanged.
    """
    x = as_tensor(x)
    if rng is None or p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    m = (rng.random(x.shape, dtype=np.float32) >= p) * (1.0 / (1.0 - p))
    return _make(x.data * m, (x,), lambda g: (g * m,), "dropout")


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if _strict:
        _check("sum", x.data)
    shape = x.shape
    ax = _norm_axis(axis, x.ndim)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape),)

    return _make(x.data.sum(axis=ax, keepdims=keepdims), (x,), bwd, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if _strict:
        _check("mean", x.data)
    shape = x.shape
    ax = _norm_axis(axis, x.ndim)
    n = math.prod(shape[a] for a in ax) if ax else 1

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g / n, shape),)

    return _make(x.data.mean(axis=ax, keepdims=keepdims), (x,), bwd, "mean")


def norm_l2(x, axis: int = -1, eps: float = 0.0, keepdims: bool = True) -> Tensor:
    """Euclidean norm along ``axis``, clamped below at ``eps``."""
    x = as_tensor(x)
    if _strict:
        _check("norm_l2", x.data)
    xd = x.data
    raw = np.sqrt(np.sum(xd * xd, axis=axis, keepdims=True))
    n = np.maximum(raw, eps)
    live = raw > eps if eps > 0 else raw > 0

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.where(live, g / np.where(live, n, 1.0), 0.0) * xd,)

    out = n if keepdims else np.squeeze(n, axis=axis)
    return _make(out, (x,), bwd, "norm_l2")


def softmax(x, axis: int = -1) -> Tensor:
    """Row-wise softmax with max subtraction; ``-inf`` entries get exactly zero weight."""
    x = as_tensor(x)
    if _strict:
        _check("softmax", x.data, allow_neginf=True)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bwd, "softmax")


def soft_cross_entropy(logits, target: np.ndarray) -> Tensor:
    """Summed cross-entropy of ``softmax(logits)`` against target distributions.

    ``logits`` is (N, V) and may contain ``-inf``; ``target`` is a fixed (N, V)
    array whose rows are distributions (or all zero, for rows to ignore). Where
    the target is zero the term is dropped, so masked logits never yield NaN.
    """
    logits = as_tensor(logits)
    target = np.asarray(target, dtype=np.float64)
    if logits.shape != target.shape:
        raise ShapeError(f"soft_cross_entropy: logits {logits.shape} vs target {target.shape}")
    if _strict:
        _check("soft_cross_entropy", logits.data, allow_neginf=True)
    ld = logits.data
    m = ld.max(axis=-1, keepdims=True)
    e = np.exp(ld - m)
    se = e.sum(axis=-1, keepdims=True)
    logp = ld - m - np.log(se)
    live = target > 0
    loss = -np.sum(np.where(live, target * np.where(live, logp, 0.0), 0.0))
    p = e / se
    tsum = target.sum(axis=-1, keepdims=True)
    return _make(np.array(loss), (logits,), lambda g: (g * (p * tsum - target),), "soft_cross_entropy")


# ---------------------------------------------------------------- linear algebra / shape

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: need >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims incompatible for {a.shape} and {b.shape}") from None
    if _strict:
        _check("matmul", a.data, b.data)
    ad, bd = a.data, b.data

    def bwd(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), bwd, "matmul")


def linear(x, W, b=None) -> Tensor:
    """``x @ W.T + b`` with ``W`` stored (out_features, in_features)."""
    x, W = as_tensor(x), as_tensor(W)
    if x.shape[-1] != W.shape[-1] or W.ndim != 2:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {W.shape}")
    if _strict:
        _check("linear", x.data, W.data)
    xd, Wd = x.data, W.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    out = (x2 @ Wd.T).reshape(*lead, Wd.shape[0])
    if b is None:
        parents = (x, W)
    else:
        b = as_tensor(b)
        if b.shape != (W.shape[0],):
            raise ShapeError(f"linear: bias {b.shape} does not match weight {W.shape}")
        out = out + b.data
        parents = (x, W, b)

    def bwd(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ Wd).reshape(xd.shape)
        gW = g2.T @ x2
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    return _make(out, parents, bwd, "linear")


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    x = as_tensor(x)
    if axes is None:
        axes = list(range(x.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def embed_lookup(E, ids: np.ndarray) -> Tensor:
    """Gather rows of ``E`` (V, d) at integer ``ids`` of any shape."""
    E = as_tensor(E)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= E.shape[0]):
        raise IndexError(f"embed_lookup: id out of range for vocabulary of {E.shape[0]}")
    V, d = E.shape

    def bwd(g):
        flat = g.reshape(-1, d)
        gE = np.zeros((V, d))
        np.add.at(gE, ids.reshape(-1), flat)
        return (gE,)

    return _make(E.data[ids], (E,), bwd, "embed_lookup")


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "relu": relu,
    "softmax": softmax,
    "sum": sum_,
    "mean": mean,
    "scale": scale,
    "embed_lookup": embed_lookup,
    "concat": lambda *ts, axis=0: concat(ts, axis),
    "reshape": reshape,
    "transpose": transpose,
    "masked_fill": masked_fill,
    "log": log,
    "exp": exp,
    "sqrt": sqrt,
    "norm_l2": norm_l2,
    "sub": sub,
    "div": div,
    "linear": linear,
    "dropout": dropout,
    "soft_cross_entropy": soft_cross_entropy,
}


def forward_primitive(kind: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------- backward

def backward(root: Tensor, seed: np.ndarray | None = None) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable leaf."""
    if seed is None:
        if root.size != 1:
            raise ShapeError(f"backward needs a scalar root or explicit seed, got shape {root.shape}")
        seed = np.ones(root.shape)
    if not root.requires_grad:
        return
    nodes: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        stack.extend(p for p in t._parents if p.requires_grad and p._id not in nodes)

    grads: dict[int, np.ndarray] = {root._id: np.asarray(seed, dtype=np.float64)}
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = np.array(g) if t.grad is None else t.grad + g
            continue
        for p, gp in zip(t._parents, t._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            prev = grads.get(p._id)
            grads[p._id] = gp if prev is None else prev + gp


class ParameterSet(Mapping):
    """Named parameters; iteration is always in sorted path order."""

    def __init__(self, items: Mapping[str, Tensor] | None = None):
        self._d: dict[str, Tensor] = {}
        for k, v in (items or {}).items():
            self[k] = v

    def __setitem__(self, path: str, value: Tensor) -> None:
        if path in self._d:
            raise KeyError(f"duplicate parameter path {path!r}")
        self._d[path] = value if isinstance(value, Tensor) else Tensor(value, requires_grad=True)

    def __getitem__(self, path: str) -> Tensor:
        return self._d[path]

    def __iter__(self):
        return iter(sorted(self._d))

    def __len__(self) -> int:
        return len(self._d)

    def trainable(self) -> dict[str, Tensor]:
        return {k: self._d[k] for k in self if self._d[k].requires_grad}

    def num_elements(self) -> int:
        return sum(t.size for t in self._d.values())


def grad(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Exact gradients of a scalar ``loss``; unreachable parameters get zeros."""
    if loss.size != 1:
        raise ShapeError(f"grad: loss must be scalar, got shape {loss.shape}")
    for p in params.values():
        p.grad = None
    backward(loss)
    return {k: (p.grad if p.grad is not None else np.zeros(p.shape)) for k, p in
            ((k, params[k]) for k in sorted(params))}


def finite_diff_grad(f: Callable[[Mapping[str, Tensor]], Any], params: Mapping[str, Tensor],
                     h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences ``(f(p+h) - f(p-h)) / 2h`` per coordinate.

    ``f`` must be pure; it is evaluated with gradient tracking off and the
    parameter buffers are perturbed in place and restored.
    """
    if h <= 0:
        raise ValueError("finite_diff_grad: h must be positive")

    def call() -> float:
        v = f(params)
        v = float(v.data.reshape(-1)[0]) if isinstance(v, Tensor) else float(v)
        if not math.isfinite(v):
            raise NonFiniteError("finite_diff_grad: f returned a non-finite value")
        return v

    out = {}
    with no_grad():
        for k in sorted(params):
            arr = params[k].data
            g = np.zeros(arr.shape)
            flat, gflat = arr.reshape(-1), g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = call()
                flat[i] = orig - h
                fm = call()
                flat[i] = orig
                gflat[i] = (fp - fm) / (2.0 * h)
            out[k] = g
    return out


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        g = g.data if isinstance(g, Tensor) else np.asarray(g)
        total += float(np.sum(g * g))
    return math.sqrt(total)


def clip_by_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    if not max_norm > 0:
        raise ValueError(f"clip_by_global_norm: max_norm must be positive, got {max_norm}")
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads)
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}
