"""Named trainable parameters and checkpoint serialization."""

from __future__ import annotations

import io
import json
import zipfile

import numpy as np

from .tape import Parameter

CKPT_VERSION = "facedecomp-ckpt-v1"


class ParamStore:
    """Registry of named parameters, each with a matching gradient buffer."""

    def __init__(self):
        self.entries: dict[str, Parameter] = {}

    def create(self, name, values, lr_scale=1.0):
        if name in self.entries:
            raise ValueError(f"duplicate parameter name: {name}")
        p = Parameter(values, name=name)
        p_lr = float(lr_scale)
        self._lr_scales = getattr(self, "_lr_scales", {})
        self._lr_scales[name] = p_lr
        self.entries[name] = p
        return p

    def __getitem__(self, name):
        return self.entries[name]

    def __contains__(self, name):
        return name in self.entries

    def names(self):
        return list(self.entries)

    def lr_scale(self, name):
        return getattr(self, "_lr_scales", {}).get(name, 1.0)

    def set_lr_scale(self, name, scale):
        self._lr_scales = getattr(self, "_lr_scales", {})
        self._lr_scales[name] = float(scale)

    def zero_grads(self):
        for p in self.entries.values():
            p.grad[...] = 0.0

    def total_grad_norm(self):
        sq = sum(float(np.sum(p.grad ** 2)) for p in self.entries.values())
        return float(np.sqrt(sq))

    def state_arrays(self):
        return {name: p.data for name, p in self.entries.items()}


def save_checkpoint(path, store, adam=None, meta=None):
    """Write a versioned checkpoint (zip of .npy arrays + json header)."""
    header = {
        "version": CKPT_VERSION,
        "meta": meta or {},
        "params": {n: list(p.data.shape) for n, p in store.entries.items()},
        "lr_scales": {n: store.lr_scale(n) for n in store.entries},
        "adam": None,
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, p in store.entries.items():
            zf.writestr(f"param/{name}.npy", _npy_bytes(p.data))
        if adam is not None:
            header["adam"] = {"step": adam.step, "lr": adam.lr, "beta1": adam.beta1,
                             "beta2": adam.beta2, "eps": adam.eps}
            for name in store.entries:
                zf.writestr(f"adam_m/{name}.npy", _npy_bytes(adam.m[name]))
                zf.writestr(f"adam_v/{name}.npy", _npy_bytes(adam.v[name]))
        zf.writestr("header.json", json.dumps(header, indent=1, sort_keys=True))


def load_checkpoint(path):
    """Return (ParamStore, AdamState-or-None, meta dict)."""
    from .adam import AdamState

    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("header.json"))
        if header.get("version") != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version in {path}")
        store = ParamStore()
        for name in header["params"]:
            arr = _read_npy(zf, f"param/{name}.npy")
            store.create(name, arr, lr_scale=header["lr_scales"].get(name, 1.0))
        adam = None
        if header["adam"] is not None:
            h = header["adam"]
            adam = AdamState(store, lr=h["lr"], beta1=h["beta1"],
                             beta2=h["beta2"], eps=h["eps"])
            adam.step = h["step"]
            for name in store.entries:
                adam.m[name] = _read_npy(zf, f"adam_m/{name}.npy")
                adam.v[name] = _read_npy(zf, f"adam_v/{name}.npy")
    return store, adam, header["meta"]


def _npy_bytes(arr):
    buf = io.BytesIO()
    np.save(buf, arr)
    return buf.getvalue()


def _read_npy(zf, name):
    return np.load(io.BytesIO(zf.read(name)))
