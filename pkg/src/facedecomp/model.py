"""The trained face model: geometry + reflectance networks behind the
renderer's scene interface, plus per-identity latent codes."""

from __future__ import annotations

import numpy as np

from . import tape
from .geometry import GeometryConfig, GeometryModel, normals_from_sdf, sdf_to_density
from .lighting import SHLight, prefilter_diffuse, specular_splitsum
from .reflectance import ReflectanceConfig, ReflectanceModel
from .tape import UsageError


class FaceModel:
    """Shared template networks for both stages."""

    def __init__(self, store, geo_config=GeometryConfig(), rfl_config=ReflectanceConfig(),
                 stage="one", seed=0, template_lr_scale=1.0, sss=False, create=True):
        self.store = store
        self.geometry = GeometryModel(store, geo_config, stage=stage, seed=seed,
                                      template_lr_scale=template_lr_scale, create=create)
        self.reflectance = ReflectanceModel(store, rfl_config, stage=stage, seed=seed + 1,
                                            template_lr_scale=template_lr_scale,
                                            sss=sss, create=create)

    @property
    def stage(self):
        return self.geometry.stage

    def enter_stage_two(self, seed=0, sss=True):
        self.geometry.enter_stage_two(seed=seed)
        self.reflectance.enter_stage_two(seed=seed + 1, sss=sss)


def create_identity_codes(store, identity, z_dim=128, sh_order=10, seed=0,
                          init_scale=0.01):
    """Per-identity latent codes and light coefficients as parameters."""
    rng = np.random.default_rng(seed)
    store.create(f"id.{identity}.z_geo", init_scale * rng.standard_normal(z_dim))
    store.create(f"id.{identity}.z_rfl", init_scale * rng.standard_normal(z_dim))
    coeffs = np.zeros((3, (sh_order + 1) ** 2))
    coeffs[:, 0] = 2.0 * np.sqrt(np.pi)  # unit uniform radiance at init
    store.create(f"id.{identity}.light", coeffs)


class NeuralScene:
    """One identity's view of the model; implements density_np and shade."""

    def __init__(self, model, z_geo, z_rfl, sh_order=10, synergy=True):
        self.model = model
        self.z_geo = z_geo
        self.z_rfl = z_rfl
        self.sh_order = sh_order
        # when off, stage-2 nets see zeroed cross-branch features (ablation)
        self.synergy = synergy

    @classmethod
    def for_identity(cls, model, identity, sh_order=10, synergy=True):
        store = model.store
        return cls(model, store[f"id.{identity}.z_geo"], store[f"id.{identity}.z_rfl"],
                   sh_order=sh_order, synergy=synergy)

    def identity_light(self, identity):
        return SHLight(self.sh_order, self.model.store[f"id.{identity}.light"])

    # -- fields --------------------------------------------------------------
    def sdf_parts(self, x):
        """Full SDF with every intermediate needed downstream."""
        geo = self.model.geometry
        rfl = self.model.reflectance
        warped, f_def = geo.deform(x, self.z_geo)
        s, f_geo = geo.template_sdf(warped)
        out = {"warped": warped, "f_def": f_def, "f_geo": f_geo,
               "raw_t": None, "f_rfl": None, "f_dis": None, "displacement": None}
        if geo.stage == "two":
            raw_t, f_rfl = rfl.template_raw(warped)
            if not self.synergy:
                f_def = tape.Tensor(np.zeros(f_def.shape))
                f_geo = tape.Tensor(np.zeros(f_geo.shape))
                f_rfl = tape.Tensor(np.zeros(f_rfl.shape))
                out["f_def"] = f_def
                out["f_geo"] = f_geo
            d, f_dis = geo.displacement(x, f_def, f_geo, f_rfl)
            s = s + d
            out.update(raw_t=raw_t, f_rfl=f_rfl, f_dis=f_dis, displacement=d)
        out["sdf"] = s
        return out

    def sdf_np(self, x):
        with tape.no_grad():
            return self.sdf_parts(tape.Tensor(np.asarray(x)))["sdf"].data

    def density_np(self, x):
        with tape.no_grad():
            s = self.sdf_parts(tape.Tensor(np.asarray(x)))["sdf"]
            return sdf_to_density(s, self.model.geometry.beta).data

    def brdf(self, x, parts):
        rfl = self.model.reflectance
        if self.model.stage == "two":
            return rfl.brdf_stage2(x, parts["raw_t"], parts["f_def"], parts["f_geo"],
                                   parts["f_dis"], parts["f_rfl"])
        return rfl.brdf_stage1(x, parts["warped"], self.z_rfl)

    def shade(self, x, w_o, light, lut, opts, create_graph=False):
        """Per-point radiance parts; x, w_o are (N, 3) numpy arrays."""
        xt = tape.Tensor(np.asarray(x), requires_grad=True)
        parts = self.sdf_parts(xt)
        s = parts["sdf"]
        sigma = sdf_to_density(s, self.model.geometry.beta)
        normal, grad_norm, valid = normals_from_sdf(s.sum(), xt, create_graph=create_graph)
        vmask = valid.astype(np.float64)[:, None]

        brdf, raw_o = self.brdf(xt, parts)
        irr = prefilter_diffuse(light, normal)
        diffuse = (brdf.albedo * (1.0 / np.pi)) * irr
        # points with a degenerate SDF gradient fall back to an unlit
        # ambient-mean response instead of propagating junk normals
        fallback = brdf.albedo * light.mean_radiance().reshape((1, 3))
        diffuse = vmask * diffuse + (1.0 - vmask) * fallback

        spec = specular_splitsum(brdf.tint, brdf.intensity, brdf.roughness,
                                 normal, w_o, light, lut)
        spec = opts.spec_gain * vmask * spec

        rfl = self.model.reflectance
        if opts.sss and rfl.scatter_created:
            f_sp, E = rfl.scatter_params(xt)
            sss = vmask * rfl.scatter_offset(xt, light, f_sp, E)
        else:
            sss = tape.Tensor(np.zeros_like(x))

        if not create_graph:
            normal = normal.detach()
        return {"sigma": sigma, "diffuse": diffuse, "specular": spec, "sss": sss,
                "albedo": brdf.albedo,
                "normal": normal, "sdf": s, "grad_norm": grad_norm,
                "raw_offset": raw_o, "displacement": parts["displacement"],
                "specular_samples": spec, "sss_samples": sss,
                "invalid_count": int(np.sum(~valid))}

    def eikonal_residual(self, x):
        """|grad S| at arbitrary points, with graph, for the unit-gradient loss."""
        xt = tape.Tensor(np.asarray(x), requires_grad=True)
        s = self.sdf_parts(xt)["sdf"]
        _, grad_norm, _ = normals_from_sdf(s.sum(), xt)
        return grad_norm
