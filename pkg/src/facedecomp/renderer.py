"""Camera rays, along-ray sampling, shading and volume compositing.

A "scene" is any object with:
    density_np(x)            -> (N,) densities, plain numpy (used for the
                                coarse-to-fine sample PDF, no gradients)
    shade(x, w_o, light, lut, opts) -> dict of tape tensors per point:
        sigma (N,), diffuse (N,3), specular (N,3), sss (N,3), normal (N,3)
        plus any auxiliary entries for losses.
Both the neural face model and the analytic ground-truth scene implement it.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tape
from .tape import UsageError

BBOX = (-1.0, 1.0)


@dataclass(frozen=True)
class Camera:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_cam: np.ndarray  # (4, 4)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        R = np.asarray(self.world_to_cam)[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise ValueError("world_to_cam rotation block must be orthonormal")

    @property
    def cam_to_world(self):
        m = np.asarray(self.world_to_cam)
        R, t = m[:3, :3], m[:3, 3]
        out = np.eye(4)
        out[:3, :3] = R.T
        out[:3, 3] = -R.T @ t
        return out

    def to_json(self):
        return {"width": self.width, "height": self.height, "fx": self.fx,
                "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "world_to_cam": np.asarray(self.world_to_cam).reshape(-1).tolist()}

    @classmethod
    def from_json(cls, d):
        return cls(d["width"], d["height"], d["fx"], d["fy"], d["cx"], d["cy"],
                   np.asarray(d["world_to_cam"], dtype=np.float64).reshape(4, 4))


def look_at_camera(eye, target, up=(0.0, 1.0, 0.0), width=128, height=128, focal=None):
    """Convenience constructor: camera at `eye` looking at `target` (-z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    true_up = np.cross(right, fwd)
    R = np.stack([right, true_up, -fwd], axis=0)  # world -> camera rows
    t = -R @ eye
    m = np.eye(4)
    m[:3, :3] = R
    m[:3, 3] = t
    if focal is None:
        focal = 1.2 * max(width, height)
    return Camera(width, height, focal, focal, width / 2.0, height / 2.0, m)


@dataclass
class RayBatch:
    origins: np.ndarray     # (R, 3)
    dirs: np.ndarray        # (R, 3) unit
    t_near: np.ndarray      # (R,)
    t_far: np.ndarray       # (R,)
    valid: np.ndarray       # (R,) bool, False for rays missing the scene box
    pixel_ids: np.ndarray   # (R,) int, v * width + u


def generate_rays(camera, pixels=None, bbox=BBOX):
    """Rays through pixel centers; t bounds from bbox intersection."""
    if pixels is None:
        u, v = np.meshgrid(np.arange(camera.width), np.arange(camera.height))
        pixels = np.stack([u.ravel(), v.ravel()], axis=-1)
    pixels = np.asarray(pixels)
    if np.any(pixels[:, 0] >= camera.width) or np.any(pixels[:, 1] >= camera.height) \
            or np.any(pixels < 0):
        raise UsageError("pixel coordinates out of bounds")
    x = (pixels[:, 0] + 0.5 - camera.cx) / camera.fx
    y = -(pixels[:, 1] + 0.5 - camera.cy) / camera.fy
    d_cam = np.stack([x, y, -np.ones_like(x)], axis=-1)
    c2w = camera.cam_to_world
    d_world = d_cam @ c2w[:3, :3].T
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    origin = np.broadcast_to(c2w[:3, 3], d_world.shape).copy()
    t0, t1, hit = _intersect_bbox(origin, d_world, bbox)
    ids = pixels[:, 1] * camera.width + pixels[:, 0]
    return RayBatch(origin, d_world, t0, t1, hit, ids.astype(np.int64))


def _intersect_bbox(origins, dirs, bbox):
    lo, hi = bbox
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (lo - origins) * inv
        tb = (hi - origins) * inv
    tmin = np.minimum(ta, tb)
    tmax = np.maximum(ta, tb)
    tmin = np.where(np.isnan(tmin), -np.inf, tmin)
    tmax = np.where(np.isnan(tmax), np.inf, tmax)
    t0 = np.maximum(tmin.max(axis=-1), 1e-3)
    t1 = tmax.min(axis=-1)
    hit = t1 > t0
    t1 = np.where(hit, t1, t0 + 1e-3)
    return t0, t1, hit


# -- deterministic per-pixel random streams ----------------------------------

def _splitmix64(x):
    x = (x + np.uint64(0x9E3779B97F4A7C15)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    z = x
    z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    return z ^ (z >> np.uint64(31))


def pixel_uniforms(seed, pixel_ids, tag, count):
    """(R, count) uniforms keyed by (seed, pixel, tag, i); order-invariant."""
    pid = np.asarray(pixel_ids, dtype=np.uint64)[:, None]
    i = np.arange(count, dtype=np.uint64)[None, :]
    with np.errstate(over="ignore"):  # modular 64-bit hashing
        key = (np.uint64(seed) * np.uint64(0x100000001B3)) ^ (pid << np.uint64(20)) \
            ^ (np.uint64(tag) << np.uint64(12)) ^ i
        h = _splitmix64(key & np.uint64(0xFFFFFFFFFFFFFFFF))
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


@dataclass(frozen=True)
class RenderOptions:
    coarse_n: int = 64
    fine_n: int = 32
    seed: int = 0
    chunk: int = 2048
    sss: bool = True
    spec_gain: float = 1.0
    stratified: bool = True


def sample_ray(rays, scene, opts):
    """Hierarchical stratified sampling. Returns t values (R, S), sorted."""
    if opts.coarse_n < 2:
        raise UsageError("coarse_n must be >= 2")
    R = len(rays.origins)
    n = opts.coarse_n
    u = pixel_uniforms(opts.seed, rays.pixel_ids, tag=1, count=n) if opts.stratified \
        else np.full((R, n), 0.5)
    edges = np.linspace(0.0, 1.0, n + 1)
    frac = edges[:-1] + u * (1.0 / n)
    t_coarse = rays.t_near[:, None] + frac * (rays.t_far - rays.t_near)[:, None]

    if opts.fine_n <= 0:
        return t_coarse

    x = rays.origins[:, None, :] + t_coarse[..., None] * rays.dirs[:, None, :]
    with tape.no_grad():
        sigma = scene.density_np(x.reshape(-1, 3)).reshape(R, n)
    dt = np.diff(t_coarse, axis=-1)
    dt = np.concatenate([dt, (rays.t_far[:, None] - t_coarse[:, -1:])], axis=-1)
    a = 1.0 - np.exp(-sigma * np.maximum(dt, 0.0))
    trans = np.cumprod(np.concatenate([np.ones((R, 1)), 1.0 - a + 1e-10], axis=-1), axis=-1)[:, :-1]
    w = trans * a + 1e-5
    pdf = w / w.sum(axis=-1, keepdims=True)
    cdf = np.concatenate([np.zeros((R, 1)), np.cumsum(pdf, axis=-1)], axis=-1)
    cdf[:, -1] = 1.0
    uf = pixel_uniforms(opts.seed, rays.pixel_ids, tag=2, count=opts.fine_n)
    idx = np.maximum(np.stack([np.searchsorted(cdf[r], uf[r], side="right") - 1
                               for r in range(R)]), 0)
    idx = np.minimum(idx, n - 1)
    c0 = np.take_along_axis(cdf, idx, axis=-1)
    c1 = np.take_along_axis(cdf, idx + 1, axis=-1)
    lo = np.take_along_axis(t_coarse, idx, axis=-1)
    seg = np.take_along_axis(dt, idx, axis=-1)
    frac_f = np.where(c1 > c0, (uf - c0) / np.maximum(c1 - c0, 1e-12), 0.5)
    t_fine = lo + frac_f * seg
    t_all = np.sort(np.concatenate([t_coarse, t_fine], axis=-1), axis=-1)
    return t_all


def composite(parts, sigma, ts, t_far):
    """Discrete volume-rendering quadrature.

    parts: dict name -> (R, S, C) tensors to composite with the same weights.
    sigma: (R, S) tensor; ts (R, S) sorted sample positions; t_far (R,).
    Returns dict with composited parts plus alpha, depth, weights.
    """
    tsd = ts.data if tape.is_tensor(ts) else ts
    if np.any(np.diff(tsd, axis=-1) < 0):
        raise UsageError("composite requires samples sorted by t")
    R, S = tsd.shape
    dt = np.concatenate([np.diff(tsd, axis=-1),
                         np.maximum(t_far[:, None] - tsd[:, -1:], 0.0)], axis=-1)
    a = sigma * dt
    acc = tape.cumsum(a, axis=-1)
    zeros = tape.Tensor(np.zeros((R, 1)))
    acc_excl = tape.concatenate([zeros, acc[:, :-1]], axis=-1)
    trans = tape.exp(-acc_excl)
    alpha_i = 1.0 - tape.exp(-a)
    w = trans * alpha_i  # (R, S)
    out = {}
    wexp = w.reshape((R, S, 1))
    for name, p in parts.items():
        out[name] = tape.tsum(wexp * p, axis=1)
    alpha = tape.tsum(w, axis=-1)
    depth = tape.tsum(w * tsd, axis=-1) / tape.maximum(alpha, 1e-8)
    out["alpha"] = alpha
    out["depth"] = depth
    out["weights"] = w
    return out


def render_rays(rays, scene, light, lut, opts, create_graph=False):
    """Full per-ray pipeline; returns a dict of (R, ...) tensors.

    rgb is the sum of the composited diffuse/specular/sss parts, so the
    decomposition identity holds exactly per pixel.
    """
    R = len(rays.origins)
    ts = sample_ray(rays, scene, opts)
    S = ts.shape[1]
    x = (rays.origins[:, None, :] + ts[..., None] * rays.dirs[:, None, :]).reshape(-1, 3)
    w_o = np.repeat(-rays.dirs, S, axis=0)
    shaded = scene.shade(x, w_o, light, lut, opts, create_graph=create_graph)
    parts = {k: shaded[k].reshape((R, S, 3))
             for k in ("diffuse", "specular", "sss", "albedo", "normal")}
    comp = composite(parts, shaded["sigma"].reshape((R, S)), ts, rays.t_far)
    comp["rgb"] = comp["diffuse"] + comp["specular"] + comp["sss"]
    mask = rays.valid.astype(np.float64)
    for k in ("rgb", "diffuse", "specular", "sss", "albedo", "normal"):
        comp[k] = comp[k] * mask[:, None]
    comp["alpha"] = comp["alpha"] * mask
    comp["aux"] = {k: v for k, v in shaded.items()
                   if k not in ("diffuse", "specular", "sss", "albedo",
                                "normal", "sigma")}
    comp["ts"] = ts
    return comp


AOV_KEYS = ("rgb", "alpha", "depth", "normal", "diffuse", "specular", "sss", "albedo")


def render_image(camera, scene, light, lut, opts):
    """Render all pixels; returns dict of (H, W, C) / (H, W) arrays."""
    rays = generate_rays(camera, None)
    H, W = camera.height, camera.width
    out = {k: np.zeros((H * W, 3))
           for k in ("rgb", "diffuse", "specular", "sss", "albedo", "normal")}
    out["alpha"] = np.zeros(H * W)
    out["depth"] = np.zeros(H * W)
    for i in range(0, H * W, opts.chunk):
        sub = RayBatch(rays.origins[i:i + opts.chunk], rays.dirs[i:i + opts.chunk],
                       rays.t_near[i:i + opts.chunk], rays.t_far[i:i + opts.chunk],
                       rays.valid[i:i + opts.chunk], rays.pixel_ids[i:i + opts.chunk])
        comp = render_rays(sub, scene, light, lut, opts)
        for k in AOV_KEYS:
            v = comp[k].data
            out[k][i:i + opts.chunk] = v
    for k in out:
        shape = (H, W) if out[k].ndim == 1 else (H, W, 3)
        out[k] = out[k].reshape(shape)
    return out


def relight(camera, scene, new_light, lut, opts):
    """Same pipeline with a substituted light; geometry and BRDF untouched."""
    return render_image(camera, scene, new_light, lut, opts)


def edit_specular(camera, scene, light, lut, opts, gain):
    """Scale the specular intensity at shading time by `gain`."""
    if gain < 0:
        raise UsageError("specular gain must be >= 0")
    return render_image(camera, scene, light, lut, replace(opts, spec_gain=float(gain)))
