import numpy as np
import pytest

from conftest import SH_ORDER, SMALL_RFL, make_model, rand_points
from facedecomp import tape
from facedecomp.lighting import SHLight
from facedecomp.reflectance import (GAUSSIAN_VARIANCES_MM2, MM_PER_SCENE_UNIT,
                                    activate_brdf, profile_eval)
from facedecomp.tape import UsageError


def test_activate_brdf_ranges():
    raw = tape.Tensor(np.random.default_rng(0).normal(size=(50, 8)) * 4.0)
    b = activate_brdf(raw)
    assert np.all((b.albedo.data > 0) & (b.albedo.data < 1))
    assert np.all((b.tint.data > 0) & (b.tint.data < 1))
    assert np.all(b.intensity.data >= 0)
    assert np.all((b.roughness.data >= 0.01) & (b.roughness.data <= 1.0))


def test_stage1_offset_is_weighted(small_model):
    """The identity offset enters with weight w = 0.05 on the raw channels."""
    rfl = small_model.reflectance
    x = rand_points(6, seed=1)
    z = small_model.store["id.0.z_rfl"]
    sample, raw_o = rfl.brdf_stage1(x, x, z)
    raw_t, _ = rfl.template_raw(x)
    ref = activate_brdf(raw_t + raw_o)
    assert np.array_equal(sample.albedo.data, ref.albedo.data)
    # returned offset already carries the 0.05 weighting
    full, _ = rfl.ofs1(np.concatenate(
        [_pe(rfl, x), np.broadcast_to(z.data, (6, z.data.shape[-1]))], axis=-1))
    assert np.allclose(raw_o.data, 0.05 * full.data, atol=1e-12)


def _pe(rfl, x):
    from facedecomp.encoding import pe_encode
    return pe_encode(x, rfl.pe).data


def test_attribute_weight_init():
    model = make_model(stage="two", seed=7)
    W = model.store["rfl.W"].data
    assert np.array_equal(W, np.array([0.4] * 3 + [0.9] * 5))


def test_stage2_collapses_to_weighted_template():
    """Fresh stage-2 offset net outputs zero: BRDF = activated(W * template)."""
    model = make_model(stage="two", seed=8)
    rfl = model.reflectance
    x = rand_points(5, seed=2)
    raw_t, f_rfl = rfl.template_raw(x)
    feats = dict(f_def=np.zeros((5, SMALL_RFL.f_def_dim)),
                 f_geo=np.zeros((5, SMALL_RFL.f_geo_dim)),
                 f_dis=np.zeros((5, SMALL_RFL.f_dis_dim)))
    sample, raw_o = rfl.brdf_stage2(x, raw_t, feats["f_def"], feats["f_geo"],
                                    feats["f_dis"], f_rfl)
    assert np.array_equal(raw_o.data, np.zeros((5, 8)))
    ref = activate_brdf(model.store["rfl.W"] * raw_t)
    assert np.array_equal(sample.roughness.data, ref.roughness.data)


def test_stage2_usage_errors(small_model):
    rfl = small_model.reflectance
    x = rand_points(3)
    with pytest.raises(UsageError):
        rfl.brdf_stage2(x, None, None, None, None, None)
    model2 = make_model(stage="two")
    raw_t, f_rfl = model2.reflectance.template_raw(x)
    with pytest.raises(UsageError):
        model2.reflectance.brdf_stage2(x, raw_t, None, None, None, f_rfl)


def test_scatter_requires_configuration(small_model):
    with pytest.raises(UsageError):
        small_model.reflectance.scatter_params(rand_points(3))


def test_scatter_outputs_nonnegative():
    model = make_model(stage="two", seed=9, sss=True)
    rfl = model.reflectance
    x = rand_points(7, seed=3)
    f_sp, E = rfl.scatter_params(x)
    assert f_sp.shape == (7, 18) and E.shape == (7, 3)
    assert np.all(f_sp.data >= 0) and np.all(E.data >= 0)
    light = SHLight.uniform(order=SH_ORDER, radiance=1.0)
    off = rfl.scatter_offset(x, light, f_sp, E)
    assert off.shape == (7, 3)
    assert np.all(off.data >= 0)


def test_scatter_weight_floor():
    model = make_model(stage="two", seed=10, sss=True)
    rfl = model.reflectance
    model.store["sss.v"].data[...] = -2.0  # clamped to zero in the offset
    x = rand_points(4, seed=4)
    f_sp, E = rfl.scatter_params(x)
    light = SHLight.uniform(order=SH_ORDER)
    assert np.array_equal(rfl.scatter_offset(x, light, f_sp, E).data,
                          np.zeros((4, 3)))


def test_profile_plane_integral_equals_weights():
    """Each normalized 2-D Gaussian integrates to 1 over the plane, so the
    profile's plane integral per channel is the sum of its six weights."""
    rng = np.random.default_rng(5)
    w = rng.uniform(0.1, 2.0, size=(18,))
    r_max = 6.0 * np.sqrt(GAUSSIAN_VARIANCES_MM2.max()) / MM_PER_SCENE_UNIT
    r = np.linspace(0.0, r_max, 20001)
    prof = profile_eval(r, np.broadcast_to(w, (len(r), 18)))
    integral = np.trapezoid(prof * (2.0 * np.pi * r)[:, None], r, axis=0)
    expect = w.reshape(3, 6).sum(axis=1)
    assert np.max(np.abs(integral - expect) / expect) < 0.01


def test_profile_scalar_and_validation():
    w = np.ones(18)
    out = profile_eval(0.0, w)
    assert out.shape == (3,)
    # at r = 0 every Gaussian peaks: value is sum of 1/(2 pi var)
    var_scene = GAUSSIAN_VARIANCES_MM2 / MM_PER_SCENE_UNIT ** 2
    assert np.allclose(out, np.sum(1.0 / (2.0 * np.pi * var_scene)), rtol=1e-12)
    with pytest.raises(UsageError):
        profile_eval(-0.1, w)
