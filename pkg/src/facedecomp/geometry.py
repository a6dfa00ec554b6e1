"""Geometry side of both stages: deformed template SDF, stage-2 displacement,
SDF-to-density conversion, normals, and marching-cubes mesh extraction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tape
from .encoding import EncodingSpec, pe_encode
from .mlp import ConfigurationError, MLPSpec, Mlp
from .tape import UsageError


@dataclass(frozen=True)
class GeometryConfig:
    dfm_layers: int = 6
    dfm_width: int = 256
    geo_layers: int = 8
    geo_width: int = 256
    geo_skip: frozenset = field(default_factory=lambda: frozenset({4}))
    dis_layers: int = 4
    dis_width: int = 256
    pe_frequencies: int = 6
    pe_dis_frequencies: int = 8
    z_dim: int = 128
    f_def_dim: int = 128
    f_geo_dim: int = 128
    f_dis_dim: int = 64
    f_rfl_dim: int = 128
    sphere_radius: float = 0.5
    beta_init: float = 0.1
    activation: str = "softplus"
    softplus_beta: float = 100.0


class GeometryModel:
    """Template + deformation SDF (stage one), plus displacement (stage two)."""

    def __init__(self, store, config=GeometryConfig(), stage="one", seed=0,
                 template_lr_scale=1.0, create=True):
        self.store = store
        self.config = config
        self.stage = stage
        c = config
        self.pe = EncodingSpec(c.pe_frequencies)
        self.pe_dis = EncodingSpec(c.pe_dis_frequencies)
        self.dfm_spec = MLPSpec(
            layer_count=c.dfm_layers, width=c.dfm_width,
            input_dim=self.pe.output_dim(3) + c.z_dim, output_dim=3,
            activation=c.activation, softplus_beta=c.softplus_beta,
            feature_dim=c.f_def_dim)
        self.geo_spec = MLPSpec(
            layer_count=c.geo_layers, width=c.geo_width,
            input_dim=self.pe.output_dim(3), output_dim=1,
            skip_layers=frozenset(s for s in c.geo_skip if 1 <= s < c.geo_layers),
            activation=c.activation, softplus_beta=c.softplus_beta,
            feature_dim=c.f_geo_dim)
        self.dis_spec = MLPSpec(
            layer_count=c.dis_layers, width=c.dis_width,
            input_dim=self.pe_dis.output_dim(3) + c.f_def_dim + c.f_geo_dim + c.f_rfl_dim,
            output_dim=1, activation=c.activation, softplus_beta=c.softplus_beta,
            feature_dim=c.f_dis_dim)
        if create:
            rng = np.random.default_rng(seed)
            self.dfm = Mlp.create(store, "geo.dfm", self.dfm_spec, seed=rng.integers(1 << 31),
                                  lr_scale=1.0)
            # residual warp: identity mapping at init
            self.dfm.zero_output_layer()
            self.tpl = Mlp.create(store, "geo.tpl", self.geo_spec, mode="geometric_sphere",
                                  seed=rng.integers(1 << 31), raw_input_dim=3,
                                  sphere_radius=c.sphere_radius, lr_scale=template_lr_scale)
            store.create("geo.log_beta", np.log(c.beta_init))
            if stage == "two":
                self._create_dis(seed=int(rng.integers(1 << 31)))
            else:
                self.dis = None
        else:
            self.dfm = Mlp(store, "geo.dfm", self.dfm_spec)
            self.tpl = Mlp(store, "geo.tpl", self.geo_spec)
            self.dis = Mlp(store, "geo.dis", self.dis_spec) if "geo.dis.w0" in store else None

    def _create_dis(self, seed=0):
        self.dis = Mlp.create(self.store, "geo.dis", self.dis_spec, seed=seed,
                              zero_output=True)

    def enter_stage_two(self, seed=0):
        """Add the displacement net; its output layer starts at zero so the
        stage-2 SDF initially equals the stage-1 SDF exactly."""
        self.stage = "two"
        if self.dis is None:
            self._create_dis(seed=seed)

    @property
    def beta(self):
        return tape.exp(self.store["geo.log_beta"])

    # -- fields -------------------------------------------------------------
    def deform(self, x, z_geo):
        """Warp observation points into template space; returns (warped, f_def)."""
        x = tape.as_tensor(x)
        z = tape.as_tensor(z_geo)
        if z.ndim == 1:
            z = tape.broadcast_to(z.reshape((1, -1)), (x.shape[0], z.shape[-1]))
        inp = tape.concatenate([pe_encode(x, self.pe), z], axis=-1)
        delta, f_def = self.dfm(inp)
        return x + delta, f_def

    def template_sdf(self, p):
        """Signed distance of the shared template; returns (sdf (N,), f_geo)."""
        s, f_geo = self.tpl(pe_encode(p, self.pe))
        return s[:, 0], f_geo

    def displacement(self, x, f_def, f_geo, f_rfl):
        """Stage-2 scalar SDF offset; returns (D (N,), f_dis)."""
        if self.stage != "two" or self.dis is None:
            raise UsageError("displacement requires stage two")
        inp = tape.concatenate([pe_encode(x, self.pe_dis),
                                tape.as_tensor(f_def), tape.as_tensor(f_geo),
                                tape.as_tensor(f_rfl)], axis=-1)
        d, f_dis = self.dis(inp)
        return d[:, 0], f_dis

    def sdf(self, x, z_geo, f_rfl_fn=None):
        """Full SDF composition. `f_rfl_fn(warped)` supplies the reflectance
        template feature for the stage-2 synergy wiring.

        Returns dict with sdf, warped, f_def, f_geo, f_dis (stage two), f_rfl.
        """
        warped, f_def = self.deform(x, z_geo)
        s, f_geo = self.template_sdf(warped)
        out = {"warped": warped, "f_def": f_def, "f_geo": f_geo,
               "f_dis": None, "f_rfl": None, "displacement": None}
        if self.stage == "two":
            if f_rfl_fn is None:
                raise UsageError("stage two sdf needs the reflectance feature hook")
            f_rfl = f_rfl_fn(warped)
            d, f_dis = self.displacement(x, f_def, f_geo, f_rfl)
            s = s + d
            out["f_dis"] = f_dis
            out["f_rfl"] = f_rfl
            out["displacement"] = d
        out["sdf"] = s
        return out


def sdf_to_density(s, beta):
    """Laplace-CDF density: sigma = (1/beta) * Psi_beta(-s)."""
    s = tape.as_tensor(s)
    beta = tape.as_tensor(beta)
    bval = beta.data if beta.size == 1 else beta.data
    if np.any(bval <= 0.0):
        raise ConfigurationError("density scale beta must be positive")
    u = tape.clip(s / beta, -40.0, 40.0)
    pos = 0.5 * tape.exp(-u)             # s >= 0 branch
    neg = 1.0 - 0.5 * tape.exp(u)        # s < 0 branch
    return tape.where(s.data >= 0.0, pos, neg) / beta


def normals_from_sdf(sdf_sum, x, eps=1e-8, create_graph=True):
    """Unit normals grad(S)/|grad(S)| for a batch of independent points.

    `sdf_sum` must be the scalar sum of per-point SDF values of `x`
    (a leaf with requires_grad). Returns (normal, grad_norm, valid_mask).
    """
    g = tape.grad(sdf_sum, x, create_graph=create_graph)
    norm = tape.sqrt(tape.tsum(g * g, axis=-1, keepdims=True) + 1e-20)
    valid = (norm.data[..., 0] > eps)
    normal = g / tape.maximum(norm, eps)
    return normal, norm[..., 0], valid


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray     # (F, 3) int

    def save_obj(self, path):
        with open(path, "w") as f:
            f.write("# facedecomp mesh (right-handed, Y-up)\n")
            for v in self.vertices:
                f.write(f"v {v[0]:.8f} {v[1]:.8f} {v[2]:.8f}\n")
            for tri in self.faces:
                f.write(f"f {tri[0] + 1} {tri[1] + 1} {tri[2] + 1}\n")

    @classmethod
    def load_obj(cls, path):
        verts, faces = [], []
        with open(path) as f:
            for line in f:
                if line.startswith("v "):
                    verts.append([float(t) for t in line.split()[1:4]])
                elif line.startswith("f "):
                    faces.append([int(t.split("/")[0]) - 1 for t in line.split()[1:4]])
        return cls(np.asarray(verts, dtype=np.float64), np.asarray(faces, dtype=np.int64))


class NoSurfaceError(RuntimeError):
    pass


def extract_mesh(sdf_fn, resolution=256, bbox=(-1.0, 1.0), chunk=65536):
    """Marching cubes on the zero level set of `sdf_fn` (points -> values)."""
    from skimage import measure

    if resolution < 16:
        raise ValueError("resolution must be >= 16")
    lo, hi = bbox
    axis = np.linspace(lo, hi, resolution)
    grid = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
    vals = np.empty(len(grid))
    with tape.no_grad():
        for i in range(0, len(grid), chunk):
            out = sdf_fn(grid[i:i + chunk])
            vals[i:i + chunk] = out.data if tape.is_tensor(out) else out
    field = vals.reshape(resolution, resolution, resolution)
    if field.min() > 0.0 or field.max() < 0.0:
        raise NoSurfaceError("no surface: the field has no zero crossing inside the box")
    spacing = (hi - lo) / (resolution - 1)
    verts, faces, _, _ = measure.marching_cubes(field, level=0.0,
                                                spacing=(spacing,) * 3)
    verts = verts + lo
    return TriangleMesh(verts.astype(np.float64), faces.astype(np.int64))
