"""Minimal reverse-mode autodiff over float64 numpy arrays.

A Tensor wraps an ndarray; ops record closures onto the implicit graph via
parent links, and ``backward`` replays a topologically ordered Tape.  Only
leaves created with ``requires_grad=True`` (and tensors computed from them)
participate in the graph; frozen tensors never receive a grad buffer.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import ShapeError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

_grad_enabled = [True]


class no_grad:
    """Context manager that disables graph recording (eval / finite differences)."""

    def __enter__(self):
        self._prev = _grad_enabled[0]
        _grad_enabled[0] = False
        return self

    def __exit__(self, *exc):
        _grad_enabled[0] = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_rule")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._rule = None

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, scalar):
        return mul(self, 1.0 / float(scalar))

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_pool(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def backward(self):
        backward(self)


class Tape:
    """Topologically ordered operation schedule: every node's inputs precede it."""

    def __init__(self, nodes):
        self.nodes = nodes

    def __len__(self):
        return len(self.nodes)


def trace(root: Tensor) -> Tape:
    """Build the Tape of graph nodes reachable from ``root`` (iterative DFS)."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            stack.append((parent, False))
    return Tape(order)


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss; accumulates grads on tunable leaves."""
    if loss.data.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ShapeError("backward on a tensor with no graph (requires_grad=False)")
    tape = trace(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node._rule is not None and node.grad is not None:
            node._rule(node.grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _acc(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _record(out: Tensor, inputs, rule) -> Tensor:
    if _grad_enabled[0] and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._parents = tuple(t for t in inputs if t.requires_grad)
        out._rule = rule
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- arithmetic ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)

    def rule(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g, b.data.shape))

    return _record(out, (a, b), rule)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data)

    def rule(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(-g, b.data.shape))

    return _record(out, (a, b), rule)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)

    def rule(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), rule)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(-a.data)

    def rule(g):
        if a.requires_grad:
            _acc(a, -g)

    return _record(out, (a,), rule)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.data.shape} @ {b.data.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def rule(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape))

    return _record(out, (a, b), rule)


# -- shape plumbing -----------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.reshape(shape))

    def rule(g):
        if a.requires_grad:
            _acc(a, g.reshape(a.data.shape))

    return _record(out, (a,), rule)


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.swapaxes(a.data, ax1, ax2))

    def rule(g):
        if a.requires_grad:
            _acc(a, np.swapaxes(g, ax1, ax2))

    return _record(out, (a,), rule)


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.broadcast_to(a.data, shape).copy())

    def rule(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g, a.data.shape))

    return _record(out, (a,), rule)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along ``axis``."""
    a = _as_tensor(a)
    extent = a.data.shape[axis]
    if start < 0 or length < 0 or start + length > extent:
        raise ShapeError(f"narrow [{start}:{start + length}) out of range for extent {extent}")
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = Tensor(a.data[index].copy())

    def rule(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[index] = g
            _acc(a, buf)

    return _record(out, (a,), rule)


def concat(parts, axis: int) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of an empty part list")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    extents = [p.data.shape[axis] for p in parts]

    def rule(g):
        offset = 0
        for p, ext in zip(parts, extents):
            if p.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(offset, offset + ext)
                _acc(p, g[tuple(index)])
            offset += ext

    return _record(out, tuple(parts), rule)


# -- reductions and pooling ----------------------------------------------------

def tensor_sum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.sum(a.data, axis=axis, keepdims=keepdims))

    def rule(g):
        if not a.requires_grad:
            return
        if axis is None:
            _acc(a, np.broadcast_to(g, a.data.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _acc(a, np.broadcast_to(gg, a.data.shape).copy())

    return _record(out, (a,), rule)


def mean_pool(a, axis=None, keepdims=False) -> Tensor:
    """Arithmetic mean along ``axis`` (sum/n so that topk_pool(k=n) matches bitwise)."""
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    out = Tensor(np.sum(a.data, axis=axis, keepdims=keepdims) / n)

    def rule(g):
        if not a.requires_grad:
            return
        if axis is None:
            _acc(a, np.broadcast_to(g / n, a.data.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _acc(a, np.broadcast_to(gg / n, a.data.shape).copy())

    return _record(out, (a,), rule)


def max_pool(a, axis: int, keepdims=False) -> Tensor:
    """Max along ``axis``; gradient routes to the lowest-index argmax on ties."""
    a = _as_tensor(a)
    out = Tensor(np.max(a.data, axis=axis, keepdims=keepdims))
    winners = np.argmax(a.data, axis=axis)

    def rule(g):
        if not a.requires_grad:
            return
        gg = g if keepdims else np.expand_dims(g, axis)
        extent = a.data.shape[axis]
        positions = np.arange(extent).reshape(
            [extent if i == axis else 1 for i in range(a.data.ndim)]
        )
        mask = positions == np.expand_dims(winners, axis)
        _acc(a, mask * gg)

    return _record(out, (a,), rule)


def topk_pool(a, axis: int, k: int, keepdims=False) -> Tensor:
    """Mean of the k largest entries along ``axis`` (ties: lowest index wins)."""
    a = _as_tensor(a)
    extent = a.data.shape[axis]
    if not 1 <= k <= extent:
        raise ShapeError(f"topk_pool k={k} out of range for extent {extent}")
    # stable argsort of -x selects exactly k winners, lowest index first on ties
    order = np.argsort(-a.data, axis=axis, kind="stable")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(0, k)
    top_idx = order[tuple(idx)]
    mask = np.zeros_like(a.data)
    np.put_along_axis(mask, top_idx, 1.0, axis=axis)
    out = Tensor(np.sum(a.data * mask, axis=axis, keepdims=keepdims) / k)

    def rule(g):
        if not a.requires_grad:
            return
        gg = g if keepdims else np.expand_dims(g, axis)
        _acc(a, mask * (gg / k))

    return _record(out, (a,), rule)


# -- nonlinearities -------------------------------------------------------------

def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))

    def rule(g):
        if a.requires_grad:
            _acc(a, g * (a.data > 0.0))

    return _record(out, (a,), rule)


def gelu(a) -> Tensor:
    """Exact-erf GELU: x * Phi(x)."""
    a = _as_tensor(a)
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out = Tensor(a.data * cdf)

    def rule(g):
        if a.requires_grad:
            pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT_2PI
            _acc(a, g * (cdf + a.data * pdf))

    return _record(out, (a,), rule)


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / np.sum(e, axis=axis, keepdims=True)
    out = Tensor(s)

    def rule(g):
        if a.requires_grad:
            _acc(a, s * (g - np.sum(g * s, axis=axis, keepdims=True)))

    return _record(out, (a,), rule)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = Tensor(shifted - lse)
    s = np.exp(shifted - lse)

    def rule(g):
        if a.requires_grad:
            _acc(a, g - s * np.sum(g, axis=axis, keepdims=True))

    return _record(out, (a,), rule)


def layer_norm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    a, gamma, beta = _as_tensor(a), _as_tensor(gamma), _as_tensor(beta)
    d = a.data.shape[-1] if a.data.ndim else 0
    if d < 2:
        raise ShapeError(f"layer_norm needs a last axis of extent >= 2, got shape {a.data.shape}")
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError("layer_norm affine parameters must have shape (d,)")
    mu = np.mean(a.data, axis=-1, keepdims=True)
    centered = a.data - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = Tensor(gamma.data * xhat + beta.data)

    def rule(g):
        if gamma.requires_grad:
            _acc(gamma, np.sum(g * xhat, axis=tuple(range(g.ndim - 1))))
        if beta.requires_grad:
            _acc(beta, np.sum(g, axis=tuple(range(g.ndim - 1))))
        if a.requires_grad:
            gx = g * gamma.data
            m1 = np.mean(gx, axis=-1, keepdims=True)
            m2 = np.mean(gx * xhat, axis=-1, keepdims=True)
            _acc(a, (gx - m1 - xhat * m2) * inv_std)

    return _record(out, (a, gamma, beta), rule)


# -- deterministic splittable randomness ----------------------------------------

class Rng:
    """PCG64 stream keyed by (seed, split path).

    ``split(i)`` derives an independent child stream; the child depends only on
    the seed and the path of split indices, never on how much the parent or any
    sibling has consumed.
    """

    algorithm = "pcg64"

    def __init__(self, seed: int, path=()):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.PCG64(seq))

    def split(self, index: int) -> "Rng":
        return Rng(self.seed, self.path + (index,))

    def normal(self, shape=(), loc: float = 0.0, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(loc, scale, shape)

    def uniform(self, low: float, high: float, shape=()) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def __repr__(self):
        return f"Rng(algorithm={self.algorithm!r}, seed={self.seed}, path={self.path})"


# -- finite-difference verification ----------------------------------------------

class GradCheckResult:
    def __init__(self, max_err: float, worst: str, per_tensor):
        self.max_err = max_err
        self.worst = worst
        self.per_tensor = per_tensor

    def ok(self, tol: float) -> bool:
        return self.max_err < tol

    def __repr__(self):
        return f"GradCheckResult(max_err={self.max_err:.3e}, worst={self.worst!r})"


def gradcheck(fn, params, eps: float = 1e-5, names=None) -> GradCheckResult:
    """Compare analytic grads of ``fn()`` (scalar) against central differences.

    The error metric is |a - n| / max(1, |a|, |n|): relative for large grads,
    absolute for small ones.  ``fn`` must be re-runnable; params are perturbed
    in place and restored.
    """
    names = names or [f"param{i}" for i in range(len(params))]
    for p in params:
        p.grad = None
    loss = fn()
    backward(loss)
    analytic = [
        np.zeros_like(p.data) if p.grad is None else np.array(p.grad) for p in params
    ]
    for p in params:
        p.grad = None

    max_err, worst, per_tensor = 0.0, "", []
    for p, ana, name in zip(params, analytic, names):
        flat = p.data.reshape(-1)
        aflat = ana.reshape(-1)
        tensor_err = 0.0
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            with no_grad():
                fp = float(fn().data)
            flat[j] = orig - eps
            with no_grad():
                fm = float(fn().data)
            flat[j] = orig
            numeric = (fp - fm) / (2.0 * eps)
            err = abs(aflat[j] - numeric) / max(1.0, abs(aflat[j]), abs(numeric))
            if err > tensor_err:
                tensor_err = err
            if err > max_err:
                max_err, worst = err, f"{name}[{j}]"
        per_tensor.append((name, tensor_err))
    return GradCheckResult(max_err, worst, per_tensor)
