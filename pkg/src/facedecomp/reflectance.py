"""BRDF fields for both stages, the global attribute weights, and the
subsurface-scattering diffuse offset."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from .encoding import EncodingSpec, pe_encode
from .mlp import MLPSpec, Mlp
from .tape import UsageError

# Six-Gaussian skin profile variances, in squared millimeters.
GAUSSIAN_VARIANCES_MM2 = np.array([0.0064, 0.0484, 0.187, 0.567, 1.99, 7.41])

# Head diameter is 0.3 scene units ~= 200 mm.
MM_PER_SCENE_UNIT = 200.0 / 0.3


@dataclass(frozen=True)
class ReflectanceConfig:
    rfl_layers: int = 8
    rfl_width: int = 256
    ofs_layers: int = 8
    ofs_width: int = 256
    scatter_layers: int = 4
    scatter_width: int = 128
    pe_frequencies: int = 6
    z_dim: int = 128
    f_rfl_dim: int = 128
    f_def_dim: int = 128
    f_geo_dim: int = 128
    f_dis_dim: int = 64
    z_lgt_dim: int = 32
    stage1_offset_weight: float = 0.05   # w in the stage-1 BRDF sum
    scatter_weight_init: float = 0.1     # v
    w_albedo_init: float = 0.4
    w_other_init: float = 0.9
    sh_coeff_count: int = 363            # 3 x 121 flattened SH weights


@dataclass
class BRDFSample:
    """Activated BRDF fields; 8 raw channels total."""
    albedo: tape.Tensor       # (N, 3) in [0, 1]
    tint: tape.Tensor         # (N, 3) in [0, 1]
    intensity: tape.Tensor    # (N, 1) >= 0
    roughness: tape.Tensor    # (N, 1) in [0.01, 1]


def activate_brdf(raw):
    """Map 8 raw channels to in-range fields (sigmoid / softplus)."""
    return BRDFSample(
        albedo=tape.sigmoid(raw[:, 0:3]),
        tint=tape.sigmoid(raw[:, 3:6]),
        intensity=tape.softplus(raw[:, 6:7]),
        roughness=0.01 + 0.99 * tape.sigmoid(raw[:, 7:8]),
    )


class ReflectanceModel:
    def __init__(self, store, config=ReflectanceConfig(), stage="one", seed=0,
                 template_lr_scale=1.0, sss=False, create=True):
        self.store = store
        self.config = config
        self.stage = stage
        c = config
        self.pe = EncodingSpec(c.pe_frequencies)
        pe3 = self.pe.output_dim(3)
        self.rfl_spec = MLPSpec(layer_count=c.rfl_layers, width=c.rfl_width,
                                input_dim=pe3, output_dim=8,
                                feature_dim=c.f_rfl_dim)
        self.ofs1_spec = MLPSpec(layer_count=c.ofs_layers, width=c.ofs_width,
                                 input_dim=pe3 + c.z_dim, output_dim=8)
        self.ofs2_spec = MLPSpec(layer_count=c.ofs_layers, width=c.ofs_width,
                                 input_dim=pe3 + c.f_def_dim + c.f_geo_dim
                                 + c.f_dis_dim + c.f_rfl_dim, output_dim=8)
        self.param_spec = MLPSpec(layer_count=c.scatter_layers, width=c.scatter_width,
                                  input_dim=pe3, output_dim=21,
                                  output_activation="softplus")
        self.sp_spec = MLPSpec(layer_count=c.scatter_layers, width=c.scatter_width,
                               input_dim=pe3 + 18, output_dim=3,
                               output_activation="softplus")
        self.light_spec = MLPSpec(layer_count=c.scatter_layers, width=c.scatter_width,
                                  input_dim=pe3 + c.z_lgt_dim + 3, output_dim=3,
                                  output_activation="softplus")
        if create:
            rng = np.random.default_rng(seed)
            self.tpl = Mlp.create(store, "rfl.tpl", self.rfl_spec,
                                  seed=rng.integers(1 << 31), lr_scale=template_lr_scale)
            self.ofs1 = Mlp.create(store, "rfl.ofs1", self.ofs1_spec,
                                   seed=rng.integers(1 << 31))
            self.ofs2 = None
            self.scatter_created = False
            if stage == "two":
                self.enter_stage_two(seed=int(rng.integers(1 << 31)), sss=sss)
        else:
            self.tpl = Mlp(store, "rfl.tpl", self.rfl_spec)
            self.ofs1 = Mlp(store, "rfl.ofs1", self.ofs1_spec) if "rfl.ofs1.w0" in store else None
            self.ofs2 = Mlp(store, "rfl.ofs2", self.ofs2_spec) if "rfl.ofs2.w0" in store else None
            self.scatter_created = "sss.param.w0" in store
            if self.scatter_created:
                self.param_net = Mlp(store, "sss.param", self.param_spec)
                self.sp_net = Mlp(store, "sss.sp", self.sp_spec)
                self.light_net = Mlp(store, "sss.light", self.light_spec)

    def enter_stage_two(self, seed=0, sss=True):
        """Create the stage-2 offset net (zero output layer, so the template
        value is reproduced exactly at the start), W, and the scatter nets."""
        c = self.config
        self.stage = "two"
        rng = np.random.default_rng(seed)
        if self.ofs2 is None:
            self.ofs2 = Mlp.create(self.store, "rfl.ofs2", self.ofs2_spec,
                                   seed=rng.integers(1 << 31), zero_output=True)
        if "rfl.W" not in self.store:
            w = np.concatenate([np.full(3, c.w_albedo_init), np.full(5, c.w_other_init)])
            self.store.create("rfl.W", w)
        if sss and not self.scatter_created:
            self.param_net = Mlp.create(self.store, "sss.param", self.param_spec,
                                        seed=rng.integers(1 << 31))
            self.sp_net = Mlp.create(self.store, "sss.sp", self.sp_spec,
                                     seed=rng.integers(1 << 31))
            self.light_net = Mlp.create(self.store, "sss.light", self.light_spec,
                                        seed=rng.integers(1 << 31))
            bound = 1.0 / np.sqrt(c.sh_coeff_count)
            proj = np.random.default_rng(rng.integers(1 << 31)).uniform(
                -bound, bound, size=(c.sh_coeff_count, c.z_lgt_dim))
            self.store.create("sss.proj_w", proj)
            self.store.create("sss.proj_b", np.zeros(c.z_lgt_dim))
            self.store.create("sss.v", np.array(c.scatter_weight_init))
            self.scatter_created = True

    # -- BRDF ----------------------------------------------------------------
    def template_raw(self, warped):
        """Raw template output at a warped point; returns (raw8, f_rfl)."""
        return self.tpl(pe_encode(warped, self.pe))

    def brdf_stage1(self, x, warped, z_rfl):
        """Stage-1 BRDF: activated(template + w * offset)."""
        raw_t, _ = self.template_raw(warped)
        z = tape.as_tensor(z_rfl)
        if z.ndim == 1:
            z = tape.broadcast_to(z.reshape((1, -1)), (tape.as_tensor(x).shape[0], z.shape[-1]))
        inp = tape.concatenate([pe_encode(x, self.pe), z], axis=-1)
        raw_o, _ = self.ofs1(inp)
        raw_o = self.config.stage1_offset_weight * raw_o
        return activate_brdf(raw_t + raw_o), raw_o

    def brdf_stage2(self, x, raw_t, f_def, f_geo, f_dis, f_rfl):
        """Stage-2 BRDF from a precomputed template raw value plus the
        synergy-conditioned offset; returns (sample, raw offset)."""
        if self.stage != "two" or self.ofs2 is None:
            raise UsageError("brdf_stage2 requires stage two")
        if f_def is None or f_geo is None or f_dis is None or f_rfl is None:
            raise UsageError("brdf_stage2 needs all synergy features")
        inp = tape.concatenate([pe_encode(x, self.pe), tape.as_tensor(f_def),
                                tape.as_tensor(f_geo), tape.as_tensor(f_dis),
                                tape.as_tensor(f_rfl)], axis=-1)
        raw_o, _ = self.ofs2(inp)
        W = self.store["rfl.W"]
        raw = W * raw_t + raw_o
        return activate_brdf(raw), raw_o

    # -- subsurface scattering ----------------------------------------------
    def scatter_params(self, x):
        """(f_sp (N,18), E (N,3)), both nonnegative."""
        if not self.scatter_created:
            raise UsageError("scatter nets are not configured")
        out, _ = self.param_net(pe_encode(x, self.pe))
        return out[:, :18], out[:, 18:]

    def scatter_offset(self, x, light, f_sp, E):
        """Diffuse offset v * F_sp(x, f_sp) * L_i(x, z_lgt, E)."""
        if not self.scatter_created:
            raise UsageError("scatter nets are not configured")
        pe_x = pe_encode(x, self.pe)
        sp, _ = self.sp_net(tape.concatenate([pe_x, f_sp], axis=-1))
        coeffs = light.coeff_tensor().reshape((1, -1))
        z_lgt = tape.matmul(coeffs, self.store["sss.proj_w"]) + self.store["sss.proj_b"]
        z_lgt = tape.broadcast_to(z_lgt, (tape.as_tensor(x).shape[0], z_lgt.shape[-1]))
        li, _ = self.light_net(tape.concatenate([pe_x, z_lgt, E], axis=-1))
        v = tape.maximum(self.store["sss.v"], 0.0)
        return v * sp * li


def profile_eval(r, f_sp):
    """Scattering profile: per-channel sum of six normalized 2-D Gaussians.

    r is entry-exit distance in scene units, f_sp either (18,) or (N, 18)
    nonnegative weights (channel-major: [R g1..g6, G g1..g6, B g1..g6]).
    Returns reflectance per unit area, shape (..., 3).
    """
    r = np.asarray(r, dtype=np.float64)
    if np.any(r < 0.0):
        raise UsageError("profile distances must be nonnegative")
    var_scene = GAUSSIAN_VARIANCES_MM2 / (MM_PER_SCENE_UNIT ** 2)
    rr = np.atleast_1d(r)
    g = np.exp(-rr[:, None] ** 2 / (2.0 * var_scene)) / (2.0 * np.pi * var_scene)  # (N, 6)
    w = np.asarray(f_sp, dtype=np.float64).reshape((-1, 3, 6))
    out = np.sum(w * g[:, None, :], axis=-1)  # (N, 3)
    return out[0] if r.ndim == 0 else out
