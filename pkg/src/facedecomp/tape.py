"""Reverse-mode automatic differentiation over dense numpy arrays.

The engine records a tape of primitive operations on ``Tensor`` objects.
Backward functions are themselves written in terms of primitives, so
gradients can be differentiated again (needed for normals of a signed
distance field and the eikonal penalty, both of which appear inside the
training loss).

All data is float64. Plain numpy arrays and python scalars mix freely
with tensors; they are treated as constants.
"""

from __future__ import annotations

import numpy as np


class UsageError(ValueError):
    """An operation was called in a way its contract forbids."""


_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables tape recording."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _as_array(x):
    if isinstance(x, np.ndarray):
        if x.dtype != np.float64:
            return x.astype(np.float64)
        return x
    return np.asarray(x, dtype=np.float64)


class Tensor:
    __slots__ = ("data", "parents", "vjp", "requires_grad", "grad", "name")

    # make `ndarray <op> Tensor` dispatch to our reflected operators
    __array_ufunc__ = None

    def __init__(self, data, parents=(), vjp=None, requires_grad=False, name=None):
        self.data = _as_array(data)
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.grad = None  # ndarray, filled for leaves by backward()
        self.name = name

    # -- basic introspection ------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    def detach(self):
        return Tensor(self.data)

    def item(self):
        return float(self.data)

    # -- operators ----------------------------------------------------------
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
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- reductions / shaping ----------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


class Parameter(Tensor):
    """Leaf tensor with a persistent gradient buffer."""

    def __init__(self, data, name=None):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def is_tensor(x):
    return isinstance(x, Tensor)


def _wants_grad(*xs):
    if not _GRAD_ENABLED:
        return False
    return any(isinstance(x, Tensor) and x.requires_grad for x in xs)


def _make(data, parents, vjp):
    if parents and any(p.requires_grad for p in parents):
        return Tensor(data, parents=parents, vjp=vjp, requires_grad=True)
    return Tensor(data)


def _unbroadcast(g, shape):
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = tsum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = tsum(g, axis=axes, keepdims=True)
    if g.shape != shape:
        g = reshape(g, shape)
    return g


# -- arithmetic primitives ---------------------------------------------------

def add(a, b):
    if not _wants_grad(a, b):
        return Tensor(_data(a) + _data(b))
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    if not _wants_grad(a, b):
        return Tensor(_data(a) - _data(b))
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape)))


def mul(a, b):
    if not _wants_grad(a, b):
        return Tensor(_data(a) * _data(b))
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(mul(g, b), a.shape),
                            _unbroadcast(mul(g, a), b.shape)))


def div(a, b):
    if not _wants_grad(a, b):
        return Tensor(_data(a) / _data(b))
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data / b.data, (a, b),
                 lambda g: (_unbroadcast(div(g, b), a.shape),
                            _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.shape)))


def neg(a):
    if not _wants_grad(a):
        return Tensor(-_data(a))
    return _make(-a.data, (a,), lambda g: (neg(g),))


def power(a, p):
    """Elementwise a**p for a constant exponent p."""
    if not _wants_grad(a):
        return Tensor(_data(a) ** p)
    return _make(a.data ** p, (a,),
                 lambda g: (mul(g, mul(p, power(a, p - 1))),))


def _data(x):
    return x.data if isinstance(x, Tensor) else _as_array(x)


# -- transcendental primitives ----------------------------------------------

def exp(a):
    if not _wants_grad(a):
        return Tensor(np.exp(_data(a)))
    out = _make(np.exp(a.data), (a,), None)
    out.vjp = lambda g: (mul(g, out),)
    return out


def log(a):
    if not _wants_grad(a):
        return Tensor(np.log(_data(a)))
    return _make(np.log(a.data), (a,), lambda g: (div(g, a),))


def sin(a):
    if not _wants_grad(a):
        return Tensor(np.sin(_data(a)))
    return _make(np.sin(a.data), (a,), lambda g: (mul(g, cos(a)),))


def cos(a):
    if not _wants_grad(a):
        return Tensor(np.cos(_data(a)))
    return _make(np.cos(a.data), (a,), lambda g: (neg(mul(g, sin(a))),))


def sqrt(a):
    if not _wants_grad(a):
        return Tensor(np.sqrt(_data(a)))
    out = _make(np.sqrt(a.data), (a,), None)
    out.vjp = lambda g: (div(g, mul(2.0, out)),)
    return out


def sigmoid(a):
    from scipy.special import expit

    if not _wants_grad(a):
        return Tensor(expit(_data(a)))
    out = _make(expit(a.data), (a,), None)
    out.vjp = lambda g: (mul(g, mul(out, sub(1.0, out))),)
    return out


def softplus(a, beta=1.0):
    """(1/beta) * log(1 + exp(beta*a)), numerically stable."""
    def _sp(x):
        return np.logaddexp(0.0, beta * x) / beta

    if not _wants_grad(a):
        return Tensor(_sp(_data(a)))
    return _make(_sp(a.data), (a,),
                 lambda g: (mul(g, sigmoid(mul(beta, a))),))


def relu(a):
    if not _wants_grad(a):
        return Tensor(np.maximum(_data(a), 0.0))
    mask = (a.data > 0.0).astype(np.float64)
    return _make(a.data * mask, (a,), lambda g: (mul(g, mask),))


def absolute(a):
    if not _wants_grad(a):
        return Tensor(np.abs(_data(a)))
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (mul(g, sign),))


def clip(a, lo, hi):
    if not _wants_grad(a):
        return Tensor(np.clip(_data(a), lo, hi))
    mask = ((a.data >= lo) & (a.data <= hi)).astype(np.float64)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (mul(g, mask),))


def maximum(a, c):
    """Elementwise max against a constant array or scalar."""
    c = _data(c)
    if not _wants_grad(a):
        return Tensor(np.maximum(_data(a), c))
    mask = (a.data >= c).astype(np.float64)
    return _make(np.maximum(a.data, c), (a,), lambda g: (_unbroadcast(mul(g, mask), a.shape),))


def where(cond, a, b):
    """Select by a constant boolean mask (no gradient through cond)."""
    cond = np.asarray(cond)
    if not _wants_grad(a, b):
        return Tensor(np.where(cond, _data(a), _data(b)))
    a, b = as_tensor(a), as_tensor(b)
    m = cond.astype(np.float64)
    return _make(np.where(cond, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(mul(g, m), a.shape),
                            _unbroadcast(mul(g, 1.0 - m), b.shape)))


# -- linear algebra / shaping -----------------------------------------------

def matmul(a, b):
    if not _wants_grad(a, b):
        return Tensor(_data(a) @ _data(b))
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise UsageError("matmul supports 2-D operands only")
    return _make(a.data @ b.data, (a, b),
                 lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)))


def transpose(a):
    if not _wants_grad(a):
        return Tensor(_data(a).T)
    return _make(a.data.T, (a,), lambda g: (transpose(g),))


def reshape(a, shape):
    if not _wants_grad(a):
        return Tensor(_data(a).reshape(shape))
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (reshape(g, old),))


def tsum(a, axis=None, keepdims=False):
    if not _wants_grad(a):
        return Tensor(np.sum(_data(a), axis=axis, keepdims=keepdims))
    shape = a.shape

    def vjp(g):
        gd = g
        if axis is not None and not keepdims:
            kshape = list(shape)
            axes = (axis,) if isinstance(axis, int) else axis
            for ax in axes:
                kshape[ax] = 1
            gd = reshape(gd, tuple(kshape))
        return (broadcast_to(gd, shape),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), vjp)


def tmean(a, axis=None, keepdims=False):
    n = _data(a).size if axis is None else np.prod(
        [_data(a).shape[ax] for ax in ((axis,) if isinstance(axis, int) else axis)])
    return div(tsum(a, axis=axis, keepdims=keepdims), float(n))


def broadcast_to(a, shape):
    if not _wants_grad(a):
        return Tensor(np.broadcast_to(_data(a), shape).copy())
    old = a.shape
    return _make(np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g: (_unbroadcast(g, old),))


def concatenate(parts, axis=-1):
    parts = list(parts)
    if not _wants_grad(*parts):
        return Tensor(np.concatenate([_data(p) for p in parts], axis=axis))
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    offs = np.cumsum([0] + sizes)

    def vjp(g):
        grads = []
        for i in range(len(parts)):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(int(offs[i]), int(offs[i + 1]))
            grads.append(getitem(g, tuple(idx)))
        return tuple(grads)

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, vjp)


def getitem(a, idx):
    if not _wants_grad(a):
        return Tensor(_data(a)[idx])
    shape = a.shape
    return _make(a.data[idx], (a,), lambda g: (_scatter(g, idx, shape),))


def _scatter(g, idx, shape):
    """Zeros of `shape` with g added at idx; adjoint of getitem."""
    if not _wants_grad(g):
        out = np.zeros(shape)
        np.add.at(out, idx, _data(g))
        return Tensor(out)
    out = np.zeros(shape)
    np.add.at(out, idx, g.data)
    return _make(out, (g,), lambda gg: (getitem(gg, idx),))


def cumsum(a, axis):
    if not _wants_grad(a):
        return Tensor(np.cumsum(_data(a), axis=axis))

    def vjp(g):
        return (flip(cumsum(flip(g, axis), axis), axis),)

    return _make(np.cumsum(a.data, axis=axis), (a,), vjp)


def flip(a, axis):
    if not _wants_grad(a):
        return Tensor(np.flip(_data(a), axis=axis))
    return _make(np.flip(a.data, axis=axis).copy(), (a,), lambda g: (flip(g, axis),))


def stack(parts, axis=0):
    return concatenate([reshape(as_tensor(p), _expand_shape(_data(p).shape, axis))
                        for p in parts], axis=axis)


def _expand_shape(shape, axis):
    s = list(shape)
    if axis < 0:
        axis = len(s) + 1 + axis
    s.insert(axis, 1)
    return tuple(s)


# -- backward ----------------------------------------------------------------

def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _backprop(root, seed, create_graph):
    grads = {id(root): seed}
    order = _toposort(root)
    ctx = no_grad() if not create_graph else _NullCtx()
    with ctx:
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None or node.vjp is None:
                if g is not None and node.vjp is None:
                    grads[id(node)] = g
                continue
            parent_grads = node.vjp(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)
            # leaves keep their entry
            if node.parents == () or node.vjp is None:
                grads[id(node)] = g
    return grads


class _NullCtx:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def backward(loss):
    """Accumulate d(loss)/d(leaf) into every reachable Parameter's .grad."""
    if loss.size != 1:
        raise UsageError("backward requires a scalar loss")
    seed = Tensor(np.ones_like(loss.data))
    grads = _backprop(loss, seed, create_graph=False)
    for node in _toposort(loss):
        if node.vjp is None and node.requires_grad and id(node) in grads:
            g = grads[id(node)].data
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g.reshape(node.data.shape)


def grad(out, wrt, create_graph=True):
    """Gradients of a scalar `out` w.r.t. a list of tensors.

    Returns tape tensors, so the result can appear inside a further
    differentiated expression when create_graph is True.
    """
    if out.size != 1:
        raise UsageError("grad requires a scalar output")
    single = isinstance(wrt, Tensor)
    wrt_list = [wrt] if single else list(wrt)
    seed = Tensor(np.ones_like(out.data))
    grads = _backprop(out, seed, create_graph=create_graph)
    res = []
    for t in wrt_list:
        g = grads.get(id(t))
        if g is None:
            g = Tensor(np.zeros_like(t.data))
        elif g.shape != t.shape:
            g = reshape(g, t.shape)
        res.append(g)
    return res[0] if single else res
