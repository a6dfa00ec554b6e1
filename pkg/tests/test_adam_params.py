import os

import numpy as np
import pytest

from facedecomp import tape
from facedecomp.adam import AdamState
from facedecomp.params import ParamStore, load_checkpoint, save_checkpoint


def test_adam_first_step_matches_reference():
    store = ParamStore()
    p = store.create("w", np.array([1.0, 2.0]))
    p.grad[...] = np.array([0.5, -1.0])
    opt = AdamState(store, lr=1e-2)
    opt.adam_step()
    # bias-corrected first step moves by lr * g / (|g| + eps)
    expect = np.array([1.0, 2.0]) - 1e-2 * np.sign([0.5, -1.0]) \
        * np.abs([0.5, -1.0]) / (np.abs([0.5, -1.0]) + 1e-8)
    assert np.allclose(p.data, expect, atol=1e-9)


def test_adam_matches_manual_two_steps():
    rng = np.random.default_rng(0)
    w0 = rng.normal(size=(4,))
    store = ParamStore()
    p = store.create("w", w0.copy())
    opt = AdamState(store, lr=3e-3, beta1=0.9, beta2=0.999, eps=1e-8)
    m = np.zeros(4)
    v = np.zeros(4)
    ref = w0.copy()
    for t in range(1, 3):
        g = rng.normal(size=(4,))
        p.grad[...] = g
        opt.adam_step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mh = m / (1 - 0.9 ** t)
        vh = v / (1 - 0.999 ** t)
        ref -= 3e-3 * mh / (np.sqrt(vh) + 1e-8)
        assert np.allclose(p.data, ref, atol=1e-12)


def test_lr_scale_damps_update():
    store = ParamStore()
    a = store.create("a", np.zeros(3), lr_scale=1.0)
    b = store.create("b", np.zeros(3), lr_scale=0.2)
    a.grad[...] = 1.0
    b.grad[...] = 1.0
    AdamState(store, lr=1e-2).adam_step()
    assert np.allclose(a.data, 5.0 * b.data, atol=1e-10)


def test_zero_grads():
    store = ParamStore()
    p = store.create("w", np.ones(2))
    p.grad[...] = 3.0
    store.zero_grads()
    assert np.array_equal(p.grad, np.zeros(2))


def test_duplicate_name_rejected():
    store = ParamStore()
    store.create("w", np.ones(2))
    with pytest.raises(ValueError):
        store.create("w", np.ones(2))


def test_checkpoint_roundtrip_bitwise(tmp_path):
    rng = np.random.default_rng(1)
    store = ParamStore()
    store.create("net.w0", rng.normal(size=(5, 3)), lr_scale=0.2)
    store.create("net.b0", rng.normal(size=(3,)))
    opt = AdamState(store, lr=2e-3)
    for p in store.entries.values():
        p.grad[...] = rng.normal(size=p.data.shape)
    opt.adam_step()
    path = os.path.join(tmp_path, "ck.zip")
    save_checkpoint(path, store, adam=opt, meta={"stage": "one"})
    store2, opt2, meta = load_checkpoint(path)
    assert meta["stage"] == "one"
    for name in store.names():
        assert np.array_equal(store[name].data, store2[name].data)
        assert store.lr_scale(name) == store2.lr_scale(name)
        assert np.array_equal(opt.m[name], opt2.m[name])
        assert np.array_equal(opt.v[name], opt2.v[name])
    assert opt2.step == opt.step


def test_checkpoint_version_rejected(tmp_path):
    import json
    import zipfile
    path = os.path.join(tmp_path, "bad.zip")
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr("header.json", json.dumps({"version": "other-v9"}))
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_adam_ignores_missing_grad_direction():
    """Parameters with zero gradient stay put on the first step."""
    store = ParamStore()
    p = store.create("w", np.array([1.0]))
    AdamState(store, lr=1e-2).adam_step()
    assert np.array_equal(p.data, np.array([1.0]))
