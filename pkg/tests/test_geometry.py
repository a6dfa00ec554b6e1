import os

import numpy as np
import pytest

from conftest import SMALL_GEO, make_model, rand_points
from facedecomp import tape
from facedecomp.geometry import (ConfigurationError, NoSurfaceError,
                                 TriangleMesh, extract_mesh, normals_from_sdf,
                                 sdf_to_density)
from facedecomp.tape import UsageError


def test_density_at_zero_is_half_inv_beta():
    for beta in (0.05, 0.1, 0.5):
        sig = sdf_to_density(np.zeros(3), beta).data
        assert np.allclose(sig, 0.5 / beta, atol=1e-12)


def test_density_limits():
    sig = sdf_to_density(np.array([-5.0, 5.0]), 0.1).data
    assert abs(sig[0] - 1.0 / 0.1) < 1e-8   # deep inside: full density
    assert sig[1] < 1e-8                     # far outside: none


def test_density_monotone_decreasing_in_s():
    s = np.linspace(-1.0, 1.0, 101)
    sig = sdf_to_density(s, 0.08).data
    assert np.all(np.diff(sig) < 0.0)


def test_density_rejects_nonpositive_beta():
    with pytest.raises(ConfigurationError):
        sdf_to_density(np.zeros(2), 0.0)
    with pytest.raises(ConfigurationError):
        sdf_to_density(np.zeros(2), -0.1)


def test_density_gradient_continuous_at_zero():
    """The two Laplace branches meet smoothly: FD gradient across s = 0."""
    x = tape.Tensor(np.array([1e-9, -1e-9]), requires_grad=True)
    g = tape.grad(sdf_to_density(x, 0.1).sum(), x, create_graph=False).data
    assert np.allclose(g[0], g[1], rtol=1e-4)


def test_normals_on_analytic_sphere():
    x = tape.Tensor(rand_points(40, seed=1, scale=0.6), requires_grad=True)
    s = tape.sqrt(tape.tsum(x * x, axis=-1) + 1e-20) - 0.3
    normal, grad_norm, valid = normals_from_sdf(s.sum(), x, create_graph=False)
    assert np.all(valid)
    ref = x.data / np.linalg.norm(x.data, axis=-1, keepdims=True)
    assert np.max(np.abs(normal.data - ref)) < 1e-6
    assert np.max(np.abs(grad_norm.data - 1.0)) < 1e-6


def test_deform_is_identity_at_init(small_model):
    geo = small_model.geometry
    x = rand_points(10, seed=2)
    z = small_model.store["id.0.z_geo"]
    warped, f_def = geo.deform(x, z)
    assert np.array_equal(warped.data, x)
    assert f_def.shape == (10, SMALL_GEO.f_def_dim)


def test_template_sdf_sphere_at_center(small_model):
    s, _ = small_model.geometry.template_sdf(np.zeros((1, 3)))
    assert abs(s.data[0] + SMALL_GEO.sphere_radius) < 1e-10


def test_stage_one_rejects_displacement(small_model):
    geo = small_model.geometry
    with pytest.raises(UsageError):
        geo.displacement(rand_points(4), None, None, None)
    with pytest.raises(UsageError):
        make_model(stage="two").geometry.sdf(rand_points(4),
                                             np.zeros(SMALL_GEO.z_dim))


def test_stage_two_entry_preserves_sdf():
    """Zero-output displacement net: stage-2 SDF equals stage-1 bitwise."""
    model = make_model(stage="one", seed=5)
    x = rand_points(20, seed=3)
    z = model.store["id.0.z_geo"]
    before = model.geometry.sdf(x, z)["sdf"].data
    model.enter_stage_two(seed=9)
    hook = lambda warped: model.reflectance.template_raw(warped)[1]
    out = model.geometry.sdf(x, z, f_rfl_fn=hook)
    assert np.array_equal(out["sdf"].data, before)
    assert np.array_equal(out["displacement"].data, np.zeros(20))


def test_beta_property(small_model):
    assert abs(float(small_model.geometry.beta.data) - SMALL_GEO.beta_init) < 1e-12


def test_obj_roundtrip(tmp_path):
    rng = np.random.default_rng(4)
    mesh = TriangleMesh(rng.uniform(-1, 1, size=(12, 3)),
                        rng.integers(0, 12, size=(7, 3)))
    path = os.path.join(tmp_path, "m.obj")
    mesh.save_obj(path)
    back = TriangleMesh.load_obj(path)
    assert np.max(np.abs(back.vertices - mesh.vertices)) < 1e-7
    assert np.array_equal(back.faces, mesh.faces)


def test_extract_mesh_sphere():
    mesh = extract_mesh(lambda p: np.linalg.norm(p, axis=-1) - 0.3,
                        resolution=48, bbox=(-0.5, 0.5))
    radii = np.linalg.norm(mesh.vertices, axis=-1)
    spacing = 1.0 / 47
    assert np.max(np.abs(radii - 0.3)) < 2 * spacing
    assert len(mesh.faces) > 100


def test_extract_mesh_errors():
    with pytest.raises(NoSurfaceError):
        extract_mesh(lambda p: np.ones(len(p)), resolution=16)
    with pytest.raises(ValueError):
        extract_mesh(lambda p: np.linalg.norm(p, axis=-1) - 0.3, resolution=8)
