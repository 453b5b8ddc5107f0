"""Dense-tensor reverse-mode differentiation engine with an Adam optimizer.

The engine records an implicit tape: every non-leaf Tensor keeps references to
its parents and a closure computing the vector-Jacobian product of the
primitive that produced it.  ``backward`` walks the recorded graph once in
reverse topological order and accumulates gradients by addition, which is the
multivariate chain rule for fan-out.

Primitives are the minimal closure needed by the mesh networks: matmul,
sparse-dense matmul, elementwise add/mul/exp/log, ReLU, reshape, concatenate,
softmax, slicing and sum/mean reductions.  64-bit arithmetic is used in tests
(gradcheck reliability); 32-bit is permitted for training runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


class AutodiffError(Exception):
    """Contract violation or numerical failure inside the engine."""


def _as_array(x, like=None):
    if isinstance(x, Tensor):
        raise TypeError("expected a raw array, got a Tensor")
    dtype = like.dtype if like is not None else None
    return np.asarray(x, dtype=dtype)


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` by summing broadcast axes."""
    if grad.shape == tuple(shape):
        return grad
    # Sum the extra leading axes first.
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    # Then any axis that was broadcast from extent 1.
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A dense real array participating in the differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "op", "name", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, op="leaf", name=None,
                 _parents=(), _vjp=None):
        self.data = np.asarray(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data
        self.grad = None
        self._parents = tuple(_parents)
        self._vjp = _vjp
        self.op = op
        self.name = name
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in self._parents)

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, op={self.op}{tag})"

    # -- operators -----------------------------------------------------------

    def _coerce(self, other):
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype), op="const")

    def __add__(self, other):
        return add(self, self._coerce(other))

    __radd__ = __add__

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __sub__(self, other):
        return add(self, -self._coerce(other))

    def __rsub__(self, other):
        return add(-self, self._coerce(other))

    def __mul__(self, other):
        if not isinstance(other, Tensor) and np.isscalar(other):
            return mul_scalar(self, float(other))
        return mul(self, self._coerce(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, Tensor) and np.isscalar(other):
            return mul_scalar(self, 1.0 / float(other))
        return mul(self, power(self._coerce(other), -1.0))

    def __pow__(self, exponent):
        return power(self, float(exponent))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def backward(self):
        backward(self)


def constant(data, dtype=None):
    return Tensor(np.asarray(data, dtype=dtype), op="const")


def parameter(data, name=None):
    arr = np.array(data, copy=True)
    return Tensor(arr, requires_grad=True, op="param", name=name)


def _node(data, parents, vjp, op):
    if any(p.requires_grad for p in parents):
        return Tensor(data, _parents=parents, _vjp=vjp, op=op)
    return Tensor(data, op=op)


# -- primitives ---------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), vjp, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), vjp, "mul")


def mul_scalar(a: Tensor, c: float) -> Tensor:
    out = a.data * c

    def vjp(g):
        return (g * c,)

    return _node(out, (a,), vjp, "mul_scalar")


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent

    def vjp(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _node(out, (a,), vjp, "power")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _node(out, (a,), vjp, "exp")


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return _node(out, (a,), vjp, "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = np.where(mask, a.data, 0.0)

    def vjp(g):
        return (g * mask,)

    return _node(out, (a,), vjp, "relu")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.data.ndim == 2 and a.data.ndim > 2:
            # Stacked operand against a plain weight matrix: fold the batch
            # into one GEMM instead of many small ones.
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _node(out, (a, b), vjp, "matmul")


def _prepare_sparse(matrix):
    if not sp.issparse(matrix) or matrix.format != "csr":
        matrix = sp.csr_matrix(matrix)
    mat_t = getattr(matrix, "_spmm_transpose", None)
    if mat_t is None:
        mat_t = sp.csr_matrix(matrix.T)
        matrix._spmm_transpose = mat_t
    return matrix, mat_t


def spmm(matrix, x: Tensor) -> Tensor:
    """Multiply a constant sparse matrix (m, n) into axis -2 of ``x``.

    ``x`` has shape (..., n, F); the result has shape (..., m, F).  The matrix
    is not differentiated.
    """
    mat, mat_t = _prepare_sparse(matrix)
    *lead, n, f = x.shape
    if n != mat.shape[1]:
        raise AutodiffError(f"spmm: matrix is {mat.shape}, operand axis -2 is {n}")

    def apply(m, arr):
        *ld, nn, ff = arr.shape
        flat = np.moveaxis(arr, -2, 0).reshape(nn, -1)
        res = m.dot(flat)
        return np.moveaxis(res.reshape(m.shape[0], *ld, ff), 0, -2)

    out = apply(mat, x.data)

    def vjp(g):
        return (apply(mat_t, g),)

    return _node(out, (x,), vjp, "spmm")


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.shape),)

    return _node(out, (a,), vjp, "reshape")


def concatenate(tensors, axis=-1) -> Tensor:
    tensors = tuple(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, tensors, vjp, "concatenate")


def take(a: Tensor, key) -> Tensor:
    out = a.data[key]

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return _node(out, (a,), vjp, "take")


def softmax(a: Tensor, axis=-1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _node(out, (a,), vjp, "softmax")


def log_softmax(a: Tensor, axis=-1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def vjp(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), vjp, "log_softmax")


def reduce_sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            for ax in sorted(a_ % a.data.ndim for a_ in axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), vjp, "sum")


def reduce_mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul_scalar(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- backward traversal -------------------------------------------------------


def _topo_order(root: Tensor):
    order = []
    seen = set()
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params=None):
    """Accumulate d(loss)/d(node) into ``.grad`` over the recorded graph.

    Returns a gradient map for ``params`` (by tensor name when set, else by
    id) if given.  The loss must be scalar; parameters are left untouched.
    """
    if loss.data.size != 1:
        raise AutodiffError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise AutodiffError("backward: loss is not finite")

    order = _topo_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)

    for node in reversed(order):
        if node._vjp is None or node.grad is None:
            continue
        grads = node._vjp(node.grad)
        if not np.all([np.isfinite(g).all() for g in grads]):
            raise AutodiffError(f"NaN/inf gradient produced by primitive '{node.op}'")
        for parent, g in zip(node._parents, grads):
            if not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(g, copy=True)
            else:
                parent.grad += g

    if params is None:
        return None
    out = {}
    for p in params:
        key = p.name if p.name is not None else id(p)
        out[key] = np.zeros_like(p.data) if p.grad is None else p.grad
    return out


# -- finite-difference gradient checking --------------------------------------


def gradcheck(forward, params, step=1e-5, clamp=1e-8):
    """Worst-case relative error between analytic and central FD gradients.

    ``forward`` takes no arguments, rebuilds the graph from ``params`` and
    returns a scalar Tensor; it must be deterministic (fixed noise inputs).
    """
    loss = forward()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            up = forward().item()
            flat[i] = keep - step
            dn = forward().item()
            flat[i] = keep
            num = (up - dn) / (2.0 * step)
            a = ana.reshape(-1)[i]
            rel = abs(a - num) / max(abs(a), abs(num), clamp)
            worst = max(worst, rel)
    return worst


# -- Adam ---------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second-moment accumulators plus the shared step counter."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState, lr: float):
    """One bias-corrected Adam update, in place on ``params``.

    ``params`` is a list of Tensors; ``grads`` aligns with it (arrays).
    """
    if lr <= 0:
        raise AutodiffError("adam_step: lr must be positive")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for p, g in zip(params, grads):
        if g.shape != p.data.shape:
            raise AutodiffError(
                f"adam_step: gradient shape {g.shape} does not match parameter {p.data.shape}")
        key = id(p)
        if key not in state.m:
            state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        m = state.m[key]
        v = state.v[key]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p.data -= lr * mhat / (np.sqrt(vhat) + state.eps)


class Adam:
    """Convenience wrapper binding an AdamState to a fixed parameter list."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState(beta1=beta1, beta2=beta2, eps=eps)

    def step(self, lr):
        grads = []
        for p in self.params:
            grads.append(np.zeros_like(p.data) if p.grad is None else p.grad)
        adam_step(self.params, grads, self.state, lr)
