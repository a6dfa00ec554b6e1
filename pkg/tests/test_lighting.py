import math
import os

import numpy as np
import pytest

from facedecomp import tape
from facedecomp.lighting import (SHLight, bake_lut, cosine_lobe_coefficients,
                                 env_to_sh, eval_light, fresnel_schlick,
                                 integrate_brdf, load_lut, lut_eval, lut_lookup,
                                 prefilter_diffuse, prefilter_specular, reflect,
                                 save_lut, specular_splitsum)


def rand_dirs(n, seed=0):
    v = np.random.default_rng(seed).normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def test_cosine_lobe_known_values():
    A = cosine_lobe_coefficients(4)
    assert np.allclose(A, [math.pi, 2.0 * math.pi / 3.0, math.pi / 4.0,
                           0.0, -math.pi / 24.0], atol=1e-12)


def test_uniform_light_mean_radiance():
    light = SHLight.uniform(order=2, radiance=0.7)
    assert np.allclose(light.mean_radiance().data, 0.7, atol=1e-12)
    assert np.allclose(eval_light(light, rand_dirs(10)).data, 0.7, atol=1e-10)


def test_prefilter_diffuse_uniform_identity():
    """Constant environment with radiance r integrates to pi * r exactly."""
    light = SHLight.uniform(order=2, radiance=1.3)
    out = prefilter_diffuse(light, rand_dirs(25, seed=1)).data
    assert np.max(np.abs(out - math.pi * 1.3)) < 1e-6


def test_prefilter_specular_uniform_fixed_point():
    light = SHLight.uniform(order=2, radiance=0.9)
    for r in (0.05, 0.3, 1.0):
        out = prefilter_specular(light, rand_dirs(10, seed=2),
                                 np.full(10, r)).data
        assert np.max(np.abs(out - 0.9)) < 1e-6


def test_prefilter_diffuse_matches_monte_carlo():
    """Band-limited random light vs brute-force cosine-hemisphere integral."""
    rng = np.random.default_rng(3)
    light = SHLight(order=2, coeffs=rng.normal(size=(3, 9)) * 0.3)
    light.coeffs[:, 0] += 2.0  # keep the environment mostly positive
    normals = rand_dirs(5, seed=4)
    d = rand_dirs(200_000, seed=5)
    rad = eval_light(light, d).data  # (M, 3)
    pred = prefilter_diffuse(light, normals).data
    for i, n in enumerate(normals):
        cosw = np.maximum(d @ n, 0.0)
        mc = (rad * cosw[:, None]).mean(axis=0) * 4.0 * math.pi
        scale = max(np.max(np.abs(mc)), 1e-6)
        assert np.max(np.abs(pred[i] - mc)) / scale < 0.02


def test_fresnel_schlick_endpoints():
    f0 = np.array([0.04, 0.5, 1.0])
    assert np.allclose(fresnel_schlick(np.ones(3), f0).data, f0, atol=1e-12)
    assert np.allclose(fresnel_schlick(np.zeros(3), f0).data, 1.0, atol=1e-12)
    # clamped below zero
    assert np.allclose(fresnel_schlick(-np.ones(3), f0).data, 1.0, atol=1e-12)


def test_reflect_mirror():
    n = np.array([[0.0, 0.0, 1.0]])
    w_o = np.array([[0.6, 0.0, 0.8]])
    assert np.allclose(reflect(w_o, n).data, [[-0.6, 0.0, 0.8]], atol=1e-12)
    # reflecting the normal itself is a fixed point
    assert np.allclose(reflect(n, n).data, n, atol=1e-12)


def test_integrate_brdf_corner():
    # normal incidence, near-mirror roughness: scale ~ 1, bias ~ 0
    b0, b1 = integrate_brdf(1.0, 0.01, 4096)
    assert b0 > 0.97 and b1 < 0.03


def test_lut_bounds_and_validation(small_lut):
    assert np.all(small_lut.table >= 0.0) and np.all(small_lut.table <= 1.0)
    with pytest.raises(ValueError):
        bake_lut(sample_count=512, grid=8)


def test_lut_lookup_exact_at_nodes(small_lut):
    lut = small_lut
    ci, rj = np.meshgrid(lut.cos_grid, lut.rough_grid, indexing="ij")
    out = lut_lookup(lut, ci, rj)
    assert np.max(np.abs(out - lut.table)) < 1e-12


def test_lut_mlp_matches_table(small_lut):
    lut = small_lut
    ci, rj = np.meshgrid(lut.cos_grid, lut.rough_grid, indexing="ij")
    b0, b1 = lut_eval(lut, ci.ravel(), rj.ravel())
    pred = np.stack([b0.data, b1.data], axis=-1).reshape(lut.table.shape)
    assert np.max(np.abs(pred - lut.table)) < 0.05


def test_lut_roundtrip(tmp_path, small_lut):
    path = os.path.join(tmp_path, "lut.zip")
    save_lut(path, small_lut)
    lut2 = load_lut(path)
    assert np.allclose(lut2.table, small_lut.table, atol=1e-7)
    assert np.array_equal(lut2.cos_grid, small_lut.cos_grid)
    b0a, _ = lut_eval(small_lut, np.array([0.5]), np.array([0.3]))
    b0b, _ = lut_eval(lut2, np.array([0.5]), np.array([0.3]))
    assert np.array_equal(b0a.data, b0b.data)


def test_lut_version_rejected(tmp_path):
    import json
    import zipfile
    path = os.path.join(tmp_path, "bad.zip")
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr("header.json", json.dumps({"version": "other"}))
    with pytest.raises(ValueError):
        load_lut(path)


def test_specular_linear_in_intensity(small_lut):
    rng = np.random.default_rng(6)
    n = rand_dirs(8, seed=7)
    w_o = rand_dirs(8, seed=8)
    tint = rng.uniform(0.1, 1.0, size=(8, 3))
    inten = rng.uniform(0.1, 2.0, size=(8, 1))
    rough = rng.uniform(0.05, 0.9, size=(8,))
    light = SHLight.uniform(order=2, radiance=1.0)
    a = specular_splitsum(tint, inten, rough, n, w_o, light, small_lut).data
    b = specular_splitsum(tint, 3.0 * inten, rough, n, w_o, light, small_lut).data
    assert np.max(np.abs(b - 3.0 * a)) < 1e-12


def test_specular_backface_zero(small_lut):
    n = np.array([[0.0, 0.0, 1.0]])
    w_o = np.array([[0.0, 0.0, -1.0]])
    light = SHLight.uniform(order=2, radiance=1.0)
    out = specular_splitsum(np.ones((1, 3)), np.ones((1, 1)), np.array([0.3]),
                            n, w_o, light, small_lut).data
    assert np.array_equal(out, np.zeros((1, 3)))


def test_env_to_sh_uniform():
    img = np.full((64, 128, 3), 0.5)
    light = env_to_sh(img, order=2)
    assert abs(light.coeffs[0, 0] - 2.0 * math.sqrt(math.pi) * 0.5) < 1e-3
    assert np.max(np.abs(light.coeffs[:, 1:])) < 1e-3


def test_env_to_sh_validation():
    with pytest.raises(ValueError):
        env_to_sh(np.zeros((4, 4, 3)))
    bad = np.full((16, 32, 3), np.nan)
    with pytest.raises(ValueError):
        env_to_sh(bad)


def test_light_white_balance_gradient_flow():
    """Coefficients on the tape keep the light differentiable end to end."""
    c = tape.Parameter(np.random.default_rng(9).normal(size=(3, 9)))
    light = SHLight(order=2, coeffs=c)
    out = prefilter_diffuse(light, rand_dirs(4, seed=10))
    tape.backward((out * out).sum())
    assert np.any(c.grad != 0.0)
