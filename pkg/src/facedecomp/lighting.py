"""Spherical-harmonic ambient light and split-sum specular pre-integration."""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import dataclass

import numpy as np

from . import tape
from .mlp import MLPSpec, Mlp
from .params import ParamStore
from .sh import band_index_table, sh_basis

LUT_VERSION = "splitsum-lut-v1"


class SHLight:
    """Order-k ambient light; coeffs shaped (3, (k+1)^2), RGB x SH index."""

    def __init__(self, order=10, coeffs=None):
        self.order = order
        n = (order + 1) ** 2
        if coeffs is None:
            coeffs = np.zeros((3, n))
        if tape.is_tensor(coeffs):
            assert coeffs.shape == (3, n)
        else:
            coeffs = np.asarray(coeffs, dtype=np.float64)
            assert coeffs.shape == (3, n)
        self.coeffs = coeffs

    @classmethod
    def uniform(cls, order=10, radiance=1.0):
        """Environment with constant radiance in every direction."""
        light = cls(order)
        c = np.asarray(radiance, dtype=np.float64) * np.ones(3)
        light.coeffs[:, 0] = c * 2.0 * math.sqrt(math.pi)
        return light

    def coeff_tensor(self):
        return tape.as_tensor(self.coeffs)

    def scaled(self, s):
        c = self.coeffs.data if tape.is_tensor(self.coeffs) else self.coeffs
        return SHLight(self.order, c * s)

    def mean_radiance(self):
        """Average radiance over the sphere (DC term only)."""
        c = self.coeff_tensor()
        return c[:, 0] * (1.0 / (2.0 * math.sqrt(math.pi)))


def eval_light(light, dirs):
    """Radiance (...,3) toward the given unit directions."""
    Y = sh_basis(dirs, light.order)
    return tape.matmul(_flat(Y), tape.transpose(light.coeff_tensor())).reshape(
        Y.shape[:-1] + (3,))


def _flat(t):
    return t.reshape((-1, t.shape[-1]))


def cosine_lobe_coefficients(order):
    """Per-band scale turning radiance coefficients into irradiance."""
    A = np.zeros(order + 1)
    A[0] = math.pi
    if order >= 1:
        A[1] = 2.0 * math.pi / 3.0
    for l in range(2, order + 1, 2):
        A[l] = (2.0 * math.pi * (-1.0) ** (l // 2 - 1) / ((l + 2) * (l - 1))
                * math.factorial(l) / (2 ** l * math.factorial(l // 2) ** 2))
    return A


def prefilter_diffuse(light, normals):
    """Hemisphere-integrated light at the normal: L_hat(n, 1) of the diffuse term."""
    A = cosine_lobe_coefficients(light.order)[band_index_table(light.order)]
    c = light.coeff_tensor() * A  # (3, n)
    Y = sh_basis(normals, light.order)
    return tape.matmul(_flat(Y), tape.transpose(c)).reshape(Y.shape[:-1] + (3,))


def prefilter_specular(light, refl_dirs, roughness):
    """Lobe-smoothed light at the reflected direction: L_hat(w_r, b_r).

    Band l is attenuated by exp(-l(l+1) * b_r^2) (spherical-Gaussian lobe
    width mapping), so b_r -> 0 approaches pointwise evaluation and a
    uniform environment is a fixed point for every roughness.
    """
    ll1 = band_index_table(light.order).astype(np.float64)
    ll1 = ll1 * (ll1 + 1.0)
    r = tape.as_tensor(roughness)
    kappa = r * r
    atten = tape.exp(-kappa.reshape((-1, 1)) * ll1[None, :])  # (N, n)
    Y = sh_basis(refl_dirs, light.order)
    Yf = _flat(Y) * atten
    out = tape.matmul(Yf, tape.transpose(light.coeff_tensor()))
    return out.reshape(Y.shape[:-1] + (3,))


def fresnel_schlick(cos_theta, f0):
    """Schlick Fresnel; cos_theta is clamped into [0, 1]."""
    c = tape.clip(tape.as_tensor(cos_theta), 0.0, 1.0)
    f0 = tape.as_tensor(f0)
    return f0 + (1.0 - f0) * (1.0 - c) ** 5


def reflect(w_o, n):
    """Mirror the outgoing direction about the normal."""
    w_o = tape.as_tensor(w_o)
    n = tape.as_tensor(n)
    d = tape.tsum(w_o * n, axis=-1, keepdims=True)
    return 2.0 * d * n - w_o


# -- split-sum LUT -----------------------------------------------------------

@dataclass
class SplitSumLUT:
    cos_grid: np.ndarray     # (G,) in (0, 1]
    rough_grid: np.ndarray   # (G,) in [0.01, 1]
    table: np.ndarray        # (G, G, 2) over (cos, roughness), (B0, B1)
    sample_count: int
    seed: int
    mlp_store: ParamStore | None = None
    mlp: Mlp | None = None


def _hammersley(n, seed):
    """2-D low-discrepancy points with a seed-driven toroidal shift."""
    i = np.arange(n, dtype=np.uint64)
    bits = i.copy()
    bits = ((bits << np.uint64(16)) | (bits >> np.uint64(16))) & np.uint64(0xFFFFFFFF)
    bits = ((bits & np.uint64(0x55555555)) << np.uint64(1)) | ((bits & np.uint64(0xAAAAAAAA)) >> np.uint64(1))
    bits = ((bits & np.uint64(0x33333333)) << np.uint64(2)) | ((bits & np.uint64(0xCCCCCCCC)) >> np.uint64(2))
    bits = ((bits & np.uint64(0x0F0F0F0F)) << np.uint64(4)) | ((bits & np.uint64(0xF0F0F0F0)) >> np.uint64(4))
    bits = ((bits & np.uint64(0x00FF00FF)) << np.uint64(8)) | ((bits & np.uint64(0xFF00FF00)) >> np.uint64(8))
    u = np.stack([i.astype(np.float64) / n, bits.astype(np.float64) * 2.3283064365386963e-10], axis=-1)
    shift = np.random.default_rng(seed).uniform(size=2)
    return np.mod(u + shift, 1.0)


def _smith_g2(n_v, n_l, alpha):
    a2 = alpha * alpha
    lv = n_l * np.sqrt(n_v * n_v * (1.0 - a2) + a2)
    ll = n_v * np.sqrt(n_l * n_l * (1.0 - a2) + a2)
    return 2.0 * n_l * n_v / np.maximum(lv + ll, 1e-12)


def integrate_brdf(n_v, roughness, sample_count, seed=0):
    """Monte-Carlo GGX split-sum pair (B0, B1) for scalar cos and roughness."""
    xi = _hammersley(sample_count, seed)
    alpha = roughness * roughness
    phi = 2.0 * math.pi * xi[:, 0]
    ct = np.sqrt((1.0 - xi[:, 1]) / (1.0 + (alpha * alpha - 1.0) * xi[:, 1]))
    st = np.sqrt(np.maximum(1.0 - ct * ct, 0.0))
    h = np.stack([np.cos(phi) * st, np.sin(phi) * st, ct], axis=-1)
    v = np.array([math.sqrt(max(1.0 - n_v * n_v, 0.0)), 0.0, n_v])
    vdh = h @ v
    l = 2.0 * vdh[:, None] * h - v
    n_l = l[:, 2]
    valid = n_l > 0.0
    n_h = np.maximum(h[:, 2], 0.0)
    vdh = np.maximum(vdh, 0.0)
    g2 = _smith_g2(max(n_v, 1e-4), np.maximum(n_l, 1e-6), alpha)
    g_vis = g2 * vdh / np.maximum(n_h * max(n_v, 1e-4), 1e-8)
    fc = (1.0 - vdh) ** 5
    a = np.sum(np.where(valid, (1.0 - fc) * g_vis, 0.0)) / sample_count
    b = np.sum(np.where(valid, fc * g_vis, 0.0)) / sample_count
    return min(max(a, 0.0), 1.0), min(max(b, 0.0), 1.0)


def bake_lut(sample_count=4096, grid=64, seed=0):
    """Bake the (B0, B1) environment-BRDF table by importance-sampled MC."""
    if sample_count < 1024:
        raise ValueError("sample_count must be >= 1024")
    cos_grid = np.arange(1, grid + 1, dtype=np.float64) / grid
    rough_grid = 0.01 + (1.0 - 0.01) * np.arange(grid, dtype=np.float64) / (grid - 1)
    table = np.empty((grid, grid, 2))
    for i, cv in enumerate(cos_grid):
        for j, r in enumerate(rough_grid):
            table[i, j] = integrate_brdf(cv, r, sample_count, seed)
    return SplitSumLUT(cos_grid, rough_grid, table, sample_count, seed)


def lut_lookup(lut, cos_v, roughness):
    """Bilinear table interpolation (numpy only, used by the analytic renderer)."""
    cg, rg, t = lut.cos_grid, lut.rough_grid, lut.table
    ci = np.clip((np.asarray(cos_v) - cg[0]) / (cg[1] - cg[0]), 0, len(cg) - 1)
    rj = np.clip((np.asarray(roughness) - rg[0]) / (rg[1] - rg[0]), 0, len(rg) - 1)
    i0 = np.clip(np.floor(ci).astype(int), 0, len(cg) - 2)
    j0 = np.clip(np.floor(rj).astype(int), 0, len(rg) - 2)
    fi = ci - i0
    fj = rj - j0
    out = (t[i0, j0] * ((1 - fi) * (1 - fj))[..., None]
           + t[i0 + 1, j0] * (fi * (1 - fj))[..., None]
           + t[i0, j0 + 1] * ((1 - fi) * fj)[..., None]
           + t[i0 + 1, j0 + 1] * (fi * fj)[..., None])
    return out


LUT_MLP_SPEC = MLPSpec(layer_count=4, width=128, input_dim=2, output_dim=2,
                       activation="relu", output_activation="sigmoid")


def fit_lut_mlp(lut, max_iters=6000, tol=0.02, lr=3e-3, seed=0):
    """Fit the 4x128 MLP to the baked table; raises if tol is not reached."""
    from .adam import AdamState

    store = ParamStore()
    mlp = Mlp.create(store, "lut", LUT_MLP_SPEC, seed=seed)
    ci, rj = np.meshgrid(lut.cos_grid, lut.rough_grid, indexing="ij")
    x = np.stack([ci.ravel(), rj.ravel()], axis=-1)
    y = lut.table.reshape(-1, 2)
    opt = AdamState(store, lr=lr)
    best = None
    for it in range(max_iters):
        pred, _ = mlp(tape.Tensor(x))
        err = pred - y
        loss = (err * err).mean()
        store.zero_grads()
        tape.backward(loss)
        opt.adam_step()
        if (it + 1) % 200 == 0:
            with tape.no_grad():
                mae = float(np.max(np.abs(mlp(tape.Tensor(x))[0].data - y)))
            if best is None or mae < best:
                best = mae
            if mae < tol * 0.9:
                break
    with tape.no_grad():
        mae = float(np.max(np.abs(mlp(tape.Tensor(x))[0].data - y)))
    if mae >= tol:
        raise RuntimeError(f"LUT MLP fit failed: max abs err {mae:.4f} >= {tol}")
    lut.mlp_store = store
    lut.mlp = mlp
    return mlp


def lut_eval(lut, cos_v, roughness):
    """(B0, B1) via the fitted MLP (tape-differentiable)."""
    if lut.mlp is None:
        raise ValueError("LUT has no fitted MLP; call fit_lut_mlp or load an asset")
    c = tape.clip(tape.as_tensor(cos_v), lut.cos_grid[0], 1.0)
    r = tape.clip(tape.as_tensor(roughness), lut.rough_grid[0], 1.0)
    x = tape.stack([c.reshape((-1,)), r.reshape((-1,))], axis=-1)
    out, _ = lut.mlp(x)
    return out[:, 0].reshape(c.shape), out[:, 1].reshape(c.shape)


def specular_splitsum(tint, intensity, roughness, n, w_o, light, lut):
    """Split-sum specular radiance.

    Effective specular color S = intensity * tint scales the whole term, and
    F0 = tint enters the scale/bias combination, so the output is linear in
    the intensity channel (this is what makes specular editing an exact
    per-pixel scaling). Back-facing geometry (n . w_o <= 0) yields zero.
    """
    tint = tape.as_tensor(tint)
    intensity = tape.as_tensor(intensity)
    n = tape.as_tensor(n)
    w_o = tape.as_tensor(w_o)
    n_v = tape.tsum(n * w_o, axis=-1, keepdims=True)
    front = (n_v.data > 0.0).astype(np.float64)
    b0, b1 = lut_eval(lut, tape.clip(n_v[..., 0], 1e-4, 1.0), roughness)
    w_r = reflect(w_o, n)
    pre = prefilter_specular(light, w_r, roughness)
    s_col = intensity * tint
    out = s_col * (tint * b0.reshape(b0.shape + (1,)) + b1.reshape(b1.shape + (1,))) * pre
    return out * front


def save_lut(path, lut):
    header = {"version": LUT_VERSION, "grid": len(lut.cos_grid),
              "sample_count": lut.sample_count, "seed": lut.seed,
              "has_mlp": lut.mlp is not None}
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr("header.json", json.dumps(header, sort_keys=True))
        zf.writestr("table.npy", _npy(lut.table.astype(np.float32)))
        zf.writestr("cos_grid.npy", _npy(lut.cos_grid))
        zf.writestr("rough_grid.npy", _npy(lut.rough_grid))
        if lut.mlp is not None:
            for name, p in lut.mlp_store.entries.items():
                zf.writestr(f"mlp/{name}.npy", _npy(p.data))


def load_lut(path):
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("header.json"))
        if header.get("version") != LUT_VERSION:
            raise ValueError(f"unsupported LUT asset version in {path}")
        lut = SplitSumLUT(
            cos_grid=np.load(io.BytesIO(zf.read("cos_grid.npy"))),
            rough_grid=np.load(io.BytesIO(zf.read("rough_grid.npy"))),
            table=np.load(io.BytesIO(zf.read("table.npy"))).astype(np.float64),
            sample_count=header["sample_count"], seed=header["seed"])
        if header["has_mlp"]:
            store = ParamStore()
            names = [n for n in zf.namelist() if n.startswith("mlp/")]
            for n in sorted(names):
                store.create(n[len("mlp/"):-len(".npy")], np.load(io.BytesIO(zf.read(n))))
            lut.mlp_store = store
            lut.mlp = Mlp(store, "lut", LUT_MLP_SPEC)
    return lut


def _npy(arr):
    buf = io.BytesIO()
    np.save(buf, arr)
    return buf.getvalue()


# -- environment-map projection ----------------------------------------------

def env_to_sh(image, order=10):
    """Project a linear equirectangular RGB map onto SH coefficients."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 8 or img.shape[1] < 8:
        raise ValueError("expected an equirectangular HxWx3 image, H,W >= 8")
    if not np.all(np.isfinite(img)):
        raise ValueError("environment map contains non-finite pixels")
    h, w = img.shape[:2]
    theta = (np.arange(h) + 0.5) / h * math.pi
    phi = (np.arange(w) + 0.5) / w * 2.0 * math.pi
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    dirs = np.stack([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)], axis=-1)
    Y = sh_basis(dirs.reshape(-1, 3), order).data  # (HW, n)
    weight = (np.sin(th) * (math.pi / h) * (2.0 * math.pi / w)).reshape(-1)
    coeffs = (img.reshape(-1, 3) * weight[:, None]).T @ Y  # (3, n)
    return SHLight(order, coeffs)


def sample_env_direction(theta, phi):
    return np.stack([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi),
                     np.cos(theta)], axis=-1)
