"""Finite-difference verification of the recorded gradients."""

from __future__ import annotations

import numpy as np

from . import tape
from .mlp import MLPSpec, Mlp
from .params import ParamStore


def finite_difference_grad(f, x, h=1e-4):
    """Central differences of scalar f at ndarray x, elementwise."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def _rel_err(a, b):
    denom = np.maximum(np.abs(a) + np.abs(b), 1e-6)
    return float(np.max(np.abs(a - b) / denom))


def check_mlp_params(seed=0, h=1e-4):
    """Backprop through a 3-layer softplus MLP vs finite differences."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    spec = MLPSpec(layer_count=3, width=8, input_dim=4, output_dim=2,
                   activation="softplus", softplus_beta=10.0)
    mlp = Mlp.create(store, "gc", spec, seed=seed)
    x = rng.standard_normal((5, 4))
    proj = rng.standard_normal((5, 2))

    def loss_np(params):
        with tape.no_grad():
            out, _ = mlp(tape.Tensor(x))
            return float(np.sum(out.data * proj))

    out, _ = mlp(tape.Tensor(x))
    loss = (out * proj).sum()
    store.zero_grads()
    tape.backward(loss)
    worst = 0.0
    for name in store.names():
        p = store[name]
        fd = finite_difference_grad(lambda arr, _p=p: _set_and_eval(_p, arr, loss_np),
                                    p.data, h=h)
        worst = max(worst, _rel_err(p.grad, fd))
    return worst


def _set_and_eval(param, arr, f):
    old = param.data.copy()
    param.data[...] = arr
    try:
        return f(None)
    finally:
        param.data[...] = old


def check_primitives(seed=0, h=1e-4):
    """A chain mixing most scalar primitives, gradient vs finite differences."""
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(0.3, 1.2, size=(6,))

    def f(arr):
        t = tape.Tensor(arr)
        y = tape.exp(0.3 * t) + tape.log(t) * tape.sin(t) - tape.sqrt(t) \
            + tape.sigmoid(t) * tape.softplus(t, beta=3.0) + t ** 2
        return (y * y).sum()

    xt = tape.Tensor(x0, requires_grad=True)
    y = tape.exp(0.3 * xt) + tape.log(xt) * tape.sin(xt) - tape.sqrt(xt) \
        + tape.sigmoid(xt) * tape.softplus(xt, beta=3.0) + xt ** 2
    g = tape.grad((y * y).sum(), xt, create_graph=False)
    with tape.no_grad():
        fd = finite_difference_grad(lambda arr: float(f(arr).data), x0, h=h)
    return _rel_err(g.data, fd)


def check_second_order(seed=0, h=1e-4):
    """d/dparam of a gradient-norm expression vs finite differences."""
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((3, 1)) * 0.7
    x = rng.standard_normal((4, 3))

    def gnorm(warr):
        wt = tape.Tensor(warr)
        xt = tape.Tensor(x, requires_grad=True)
        s = tape.softplus(tape.matmul(xt, wt), beta=2.0).sum()
        g = tape.grad(s, xt, create_graph=True)
        return (g * g).sum()

    wp = tape.Parameter(w)
    xt = tape.Tensor(x, requires_grad=True)
    s = tape.softplus(tape.matmul(xt, wp), beta=2.0).sum()
    g = tape.grad(s, xt, create_graph=True)
    tape.backward((g * g).sum())
    fd = finite_difference_grad(lambda arr: float(gnorm(arr).data), w, h=h)
    return _rel_err(wp.grad, fd)


def run_all(seed=0, threshold=1e-4):
    """Returns list of (name, max relative error, passed)."""
    checks = [("mlp_params", check_mlp_params),
              ("primitive_chain", check_primitives),
              ("second_order", check_second_order)]
    results = []
    for name, fn in checks:
        err = fn(seed=seed)
        results.append((name, err, err < threshold))
    return results
