import numpy as np
import pytest

from facedecomp.geometry import GeometryConfig
from facedecomp.lighting import bake_lut, fit_lut_mlp
from facedecomp.model import FaceModel, create_identity_codes
from facedecomp.params import ParamStore
from facedecomp.reflectance import ReflectanceConfig

# compact network shapes used across the unit tests (CPU-friendly)
SH_ORDER = 2
SMALL_GEO = GeometryConfig(dfm_layers=3, dfm_width=48, geo_layers=4, geo_width=48,
                           geo_skip=frozenset({2}), dis_layers=2, dis_width=48,
                           z_dim=16, f_def_dim=16, f_geo_dim=16, f_dis_dim=8,
                           f_rfl_dim=16, sphere_radius=0.3)
SMALL_RFL = ReflectanceConfig(rfl_layers=3, rfl_width=48, ofs_layers=3, ofs_width=48,
                              scatter_layers=2, scatter_width=24, z_dim=16,
                              f_rfl_dim=16, f_def_dim=16, f_geo_dim=16, f_dis_dim=8,
                              z_lgt_dim=8, sh_coeff_count=3 * (SH_ORDER + 1) ** 2)


@pytest.fixture(scope="session")
def small_lut():
    """Coarse baked split-sum table with a fitted MLP, shared by the suite."""
    lut = bake_lut(sample_count=1024, grid=16)
    fit_lut_mlp(lut, max_iters=6000, tol=0.05, lr=3e-3)
    return lut


def make_model(stage="one", seed=3, sss=False, identities=(0,)):
    store = ParamStore()
    model = FaceModel(store, SMALL_GEO, SMALL_RFL, stage=stage, seed=seed, sss=sss)
    for i in identities:
        create_identity_codes(store, i, z_dim=SMALL_GEO.z_dim, sh_order=SH_ORDER,
                              seed=seed + 50 + (i if isinstance(i, int) else 0))
    return model


@pytest.fixture()
def small_model():
    return make_model()


def rand_points(n, seed=0, scale=0.4):
    return np.random.default_rng(seed).uniform(-scale, scale, size=(n, 3))
