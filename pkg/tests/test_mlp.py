import numpy as np
import pytest

from facedecomp import tape
from facedecomp.encoding import EncodingSpec, pe_encode
from facedecomp.gradcheck import finite_difference_grad
from facedecomp.mlp import ConfigurationError, MLPSpec, Mlp
from facedecomp.params import ParamStore


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        MLPSpec(layer_count=0, width=8, input_dim=2, output_dim=1)
    with pytest.raises(ConfigurationError):
        MLPSpec(layer_count=3, width=8, input_dim=2, output_dim=1,
                skip_layers=frozenset({3}))
    with pytest.raises(ConfigurationError):
        MLPSpec(layer_count=3, width=8, input_dim=2, output_dim=1, activation="tanh")


def test_forward_shapes_and_skip():
    store = ParamStore()
    spec = MLPSpec(layer_count=4, width=16, input_dim=5, output_dim=3,
                   skip_layers=frozenset({2}), feature_dim=7)
    mlp = Mlp.create(store, "m", spec, seed=1)
    out, feat = mlp(np.random.default_rng(0).normal(size=(6, 5)))
    assert out.shape == (6, 3)
    assert feat.shape == (6, 7)
    # skip layer consumes width + input_dim
    assert store["m.w2"].shape == (16 + 5, 16)


def test_input_dim_mismatch():
    store = ParamStore()
    spec = MLPSpec(layer_count=2, width=8, input_dim=4, output_dim=1)
    mlp = Mlp.create(store, "m", spec)
    with pytest.raises(ConfigurationError):
        mlp(np.zeros((3, 5)))


def test_zero_output_layer_gives_zero():
    store = ParamStore()
    spec = MLPSpec(layer_count=3, width=8, input_dim=2, output_dim=4)
    mlp = Mlp.create(store, "m", spec, seed=2, zero_output=True)
    out, _ = mlp(np.random.default_rng(1).normal(size=(5, 2)))
    assert np.array_equal(out.data, np.zeros((5, 4)))


def test_geometric_sphere_init_approximates_sphere():
    """Fresh geometry template with sphere init: S(x) close to |x| - r."""
    store = ParamStore()
    pe = EncodingSpec(frequency_count=6)
    spec = MLPSpec(layer_count=4, width=64, input_dim=pe.output_dim(3),
                   output_dim=1, activation="softplus", softplus_beta=100.0)
    mlp = Mlp.create(store, "m", spec, mode="geometric_sphere", seed=3,
                     raw_input_dim=3, sphere_radius=0.5)
    origin = mlp(pe_encode(np.zeros((1, 3)), pe))[0].data[0, 0]
    assert abs(origin - (-0.5)) < 0.1
    rng = np.random.default_rng(4)
    x = rng.uniform(-0.9, 0.9, size=(400, 3))
    s = mlp(pe_encode(x, pe))[0].data[:, 0]
    ref = np.linalg.norm(x, axis=-1) - 0.5
    # monotone-in-radius structure: clearly positive well outside the sphere
    assert np.corrcoef(s, ref)[0, 1] > 0.6
    far = ref > 0.3
    assert np.mean(s[far] > 0) > 0.75


def test_sigmoid_output_bounds():
    store = ParamStore()
    spec = MLPSpec(layer_count=2, width=8, input_dim=3, output_dim=2,
                   output_activation="sigmoid")
    mlp = Mlp.create(store, "m", spec, seed=5)
    out, _ = mlp(np.random.default_rng(2).normal(size=(10, 3)) * 5)
    assert np.all(out.data > 0) and np.all(out.data < 1)


def test_mlp_gradcheck_all_params():
    """Analytic grads vs central differences, h=1e-4, rel err < 1e-4."""
    store = ParamStore()
    spec = MLPSpec(layer_count=3, width=6, input_dim=3, output_dim=2,
                   activation="softplus", softplus_beta=8.0)
    mlp = Mlp.create(store, "m", spec, seed=6)
    rng = np.random.default_rng(7)
    x = rng.normal(size=(4, 3))
    proj = rng.normal(size=(4, 2))
    out, _ = mlp(tape.Tensor(x))
    store.zero_grads()
    tape.backward((out * proj).sum())
    for name in store.names():
        p = store[name]

        def f(arr, _p=p):
            old = _p.data.copy()
            _p.data[...] = arr
            try:
                with tape.no_grad():
                    return float(np.sum(mlp(tape.Tensor(x))[0].data * proj))
            finally:
                _p.data[...] = old

        fd = finite_difference_grad(f, p.data, h=1e-4)
        denom = np.maximum(np.abs(p.grad) + np.abs(fd), 1e-6)
        assert np.max(np.abs(p.grad - fd) / denom) < 1e-4, name
