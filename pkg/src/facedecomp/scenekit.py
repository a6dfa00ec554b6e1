"""Dataset format, synthetic ground-truth generation, and evaluation metrics."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import tape
from .geometry import TriangleMesh, extract_mesh, sdf_to_density
from .lighting import SHLight, lut_lookup, prefilter_diffuse, prefilter_specular, reflect
from .renderer import Camera, RenderOptions, look_at_camera, render_image
from .tape import UsageError

DS_VERSION = "facedecomp-ds-v1"


# -- color transfer -----------------------------------------------------------

def srgb_encode(linear):
    l = np.clip(np.asarray(linear, dtype=np.float64), 0.0, 1.0)
    return np.where(l <= 0.0031308, 12.92 * l, 1.055 * l ** (1.0 / 2.4) - 0.055)


def srgb_decode(s):
    s = np.asarray(s, dtype=np.float64)
    return np.where(s <= 0.04045, s / 12.92, ((s + 0.055) / 1.055) ** 2.4)


# -- image I/O ----------------------------------------------------------------

def save_pfm(path, image):
    """Little-endian color PFM, scale -1.0, bottom-to-top row order."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 3 or img.shape[2] != 3:
        raise UsageError("save_pfm expects an HxWx3 image")
    with open(path, "wb") as f:
        f.write(b"PF\n")
        f.write(f"{img.shape[1]} {img.shape[0]}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(img[::-1]).tobytes())


def load_pfm(path):
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header != b"PF":
            raise ValueError(f"{path}: not a color PFM file")
        w, h = (int(t) for t in f.readline().split())
        scale = float(f.readline())
        data = np.frombuffer(f.read(), dtype="<f4" if scale < 0 else ">f4")
        if data.size != w * h * 3:
            raise ValueError(f"{path}: truncated PFM payload")
        return data.reshape(h, w, 3)[::-1].astype(np.float64)


def save_png(path, image):
    """8-bit PNG from values in [0, 1] (display space)."""
    from PIL import Image

    arr = np.clip(np.asarray(image), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path)


def load_png(path):
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float64) / 255.0


# -- dataset ------------------------------------------------------------------

@dataclass
class View:
    camera: Camera
    image: np.ndarray      # (H, W, 3) linear radiance
    mask: np.ndarray       # (H, W) bool
    gt: dict = field(default_factory=dict)


@dataclass
class Identity:
    name: str
    views: list


@dataclass
class Dataset:
    root: str
    identities: list       # list of Identity
    manifest: dict


def save_dataset(root, identities, extra_meta=None):
    """Write manifest.json plus images/, masks/ (and gt/ when present)."""
    os.makedirs(root, exist_ok=True)
    for sub in ("images", "masks", "gt"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    views_meta = []
    ident_meta = []
    idx = 0
    for ident in identities:
        view_ids = []
        for view in ident.views:
            img_rel = f"images/{idx:04d}.pfm"
            mask_rel = f"masks/{idx:04d}.png"
            save_pfm(os.path.join(root, img_rel), view.image)
            save_png(os.path.join(root, mask_rel), view.mask.astype(np.float64))
            meta = {"image": img_rel, "mask": mask_rel, "color_space": "linear",
                    "camera": view.camera.to_json()}
            gt_meta = {}
            for key, val in view.gt.items():
                rel = f"gt/{idx:04d}_{key}.pfm"
                save_pfm(os.path.join(root, rel), val)
                gt_meta[key] = rel
            if gt_meta:
                meta["gt"] = gt_meta
            views_meta.append(meta)
            view_ids.append(idx)
            idx += 1
        ident_meta.append({"name": ident.name, "views": view_ids})
    manifest = {"version": DS_VERSION, "views": views_meta,
                "identities": ident_meta}
    if extra_meta:
        manifest["meta"] = extra_meta
    with open(os.path.join(root, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return manifest


def load_dataset(root, load_gt=False):
    mpath = os.path.join(root, "manifest.json")
    if not os.path.exists(mpath):
        raise FileNotFoundError(f"no manifest.json under {root}")
    with open(mpath) as f:
        manifest = json.load(f)
    if manifest.get("version") != DS_VERSION:
        raise ValueError(f"unsupported dataset version in {mpath}")
    views = []
    for meta in manifest["views"]:
        ipath = os.path.join(root, meta["image"])
        kpath = os.path.join(root, meta["mask"])
        for p in (ipath, kpath):
            if not os.path.exists(p):
                raise FileNotFoundError(f"dataset file missing: {p}")
        if meta["image"].endswith(".pfm"):
            image = load_pfm(ipath)
        else:
            image = srgb_decode(load_png(ipath))
        mask_img = load_png(kpath)
        if mask_img.ndim == 3:
            mask_img = mask_img[..., 0]
        mask = mask_img >= 0.5
        gt = {}
        if load_gt:
            for key, rel in meta.get("gt", {}).items():
                gt[key] = load_pfm(os.path.join(root, rel))
        views.append(View(Camera.from_json(meta["camera"]), image, mask, gt))
    identities = [Identity(im["name"], [views[i] for i in im["views"]])
                  for im in manifest["identities"]]
    return Dataset(root, identities, manifest)


# -- analytic ground-truth scene ---------------------------------------------

@dataclass
class SyntheticSceneSpec:
    seed: int = 0
    sphere_radius: float = 0.32
    bump_count: int = 5
    bump_amplitude: float = 0.05
    bump_width: float = 0.12
    palette: np.ndarray | None = None       # (3, 3) rows = rgb colors
    spec_intensity: float = 0.35
    spec_tint: tuple = (0.9, 0.85, 0.8)
    roughness_range: tuple = (0.15, 0.5)
    light: SHLight | None = None
    sss_amplitude: float = 0.0              # optional GT diffuse offset
    view_count: int = 5
    resolution: int = 64
    samples_per_ray: int = 256
    beta: float = 0.003
    camera_distance: float = 1.6
    azimuth_span_deg: float = 120.0
    mesh_resolution: int = 512


class AnalyticScene:
    """Closed-form blob head with smooth reflectance; renderer-compatible."""

    def __init__(self, spec):
        rng = np.random.default_rng(spec.seed)
        self.spec = spec
        # bumps biased toward the +z (camera-facing) hemisphere
        dirs = rng.normal(size=(spec.bump_count, 3))
        dirs[:, 2] = np.abs(dirs[:, 2]) + 0.3
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
        self.bump_centers = dirs * spec.sphere_radius
        self.bump_amps = spec.bump_amplitude * rng.uniform(0.4, 1.0, spec.bump_count) \
            * rng.choice([-1.0, 1.0], spec.bump_count)
        self.bump_widths = spec.bump_width * rng.uniform(0.7, 1.3, spec.bump_count)
        if spec.palette is None:
            base = np.array([[0.7, 0.45, 0.35], [0.55, 0.35, 0.3], [0.75, 0.6, 0.5]])
            self.palette = np.clip(base + 0.1 * rng.uniform(-1, 1, (3, 3)), 0.05, 0.95)
        else:
            self.palette = np.asarray(spec.palette, dtype=np.float64)
        self.palette_dirs = rng.normal(size=(3, 3))
        self.palette_dirs /= np.linalg.norm(self.palette_dirs, axis=-1, keepdims=True)
        if spec.light is None:
            light = SHLight.uniform(order=2, radiance=1.0)
            c = light.coeffs
            c[:, 1:4] += 0.25 * rng.uniform(-1, 1, (3, 3))
            self.light = light
        else:
            self.light = spec.light
        self._check_closed()

    def _check_closed(self):
        # the zero set stays closed if bumps cannot reach the box boundary
        reach = self.spec.sphere_radius + np.max(np.abs(self.bump_amps)) + 1e-3
        if reach >= 1.0:
            raise ValueError("synthetic head SDF reaches the bounding box; "
                             "shrink sphere_radius or bump_amplitude")

    # exact signed distance of the sphere, perturbed by Gaussian bumps
    def sdf(self, x):
        x = np.asarray(x, dtype=np.float64)
        r = np.linalg.norm(x, axis=-1)
        s = r - self.spec.sphere_radius
        for c, a, w in zip(self.bump_centers, self.bump_amps, self.bump_widths):
            d2 = np.sum((x - c) ** 2, axis=-1)
            s = s - a * np.exp(-d2 / (2.0 * w * w))
        return s

    def sdf_grad(self, x):
        x = np.asarray(x, dtype=np.float64)
        r = np.linalg.norm(x, axis=-1, keepdims=True)
        g = x / np.maximum(r, 1e-12)
        for c, a, w in zip(self.bump_centers, self.bump_amps, self.bump_widths):
            diff = x - c
            d2 = np.sum(diff ** 2, axis=-1, keepdims=True)
            g = g + (a / (w * w)) * np.exp(-d2 / (2.0 * w * w)) * diff
        return g

    def albedo(self, x):
        """Smooth tri-color blend via a softmax over three half-space scores."""
        score = np.asarray(x) @ self.palette_dirs.T / 0.25
        score -= score.max(axis=-1, keepdims=True)
        w = np.exp(score)
        w /= w.sum(axis=-1, keepdims=True)
        return w @ self.palette

    def brdf_fields(self, x):
        x = np.asarray(x)
        lo, hi = self.spec.roughness_range
        rough = lo + (hi - lo) * 0.5 * (1.0 + np.sin(4.0 * x[..., 0] + 2.0 * x[..., 1]))
        inten = self.spec.spec_intensity * (0.6 + 0.4 * 0.5 * (1.0 + np.cos(3.0 * x[..., 2])))
        tint = np.broadcast_to(np.asarray(self.spec.spec_tint), x.shape).copy()
        return tint, inten[..., None], rough[..., None]

    # -- renderer scene interface -------------------------------------------
    def density_np(self, x):
        return sdf_to_density(self.sdf(x), self.spec.beta).data

    def shade(self, x, w_o, light, lut, opts, create_graph=False):
        x = np.asarray(x)
        sigma = sdf_to_density(self.sdf(x), self.spec.beta)
        g = self.sdf_grad(x)
        n = g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)
        alb = self.albedo(x)
        irr = prefilter_diffuse(light, n).data
        diffuse = alb / np.pi * irr
        tint, inten, rough = self.brdf_fields(x)
        n_v = np.sum(n * w_o, axis=-1, keepdims=True)
        front = (n_v > 0.0).astype(np.float64)
        b = lut_lookup(lut, np.clip(n_v[:, 0], 1e-4, 1.0), rough[:, 0])
        w_r = reflect(w_o, n).data
        pre = prefilter_specular(light, w_r, rough).data
        s_col = inten * tint
        spec = opts.spec_gain * front * s_col * (tint * b[:, :1] + b[:, 1:2]) * pre
        if self.spec.sss_amplitude > 0.0 and opts.sss:
            sss = self.spec.sss_amplitude * alb * irr / np.pi
        else:
            sss = np.zeros_like(diffuse)
        return {"sigma": sigma, "diffuse": tape.Tensor(diffuse),
                "specular": tape.Tensor(spec), "sss": tape.Tensor(sss),
                "albedo": tape.Tensor(alb), "normal": tape.Tensor(n)}


def synthetic_cameras(spec):
    """view_count cameras on an arc around +z, looking at the origin."""
    n = spec.view_count
    span = np.deg2rad(spec.azimuth_span_deg)
    az = np.linspace(-span / 2.0, span / 2.0, n) if n > 1 else np.array([0.0])
    cams = []
    for i, a in enumerate(az):
        el = 0.15 * np.sin(2.1 * i)  # mild elevation variation
        eye = spec.camera_distance * np.array([np.sin(a) * np.cos(el),
                                               np.sin(el),
                                               np.cos(a) * np.cos(el)])
        cams.append(look_at_camera(eye, (0, 0, 0), width=spec.resolution,
                                   height=spec.resolution))
    return cams


def render_ground_truth(scene, camera, lut):
    spec = scene.spec
    opts = RenderOptions(coarse_n=spec.samples_per_ray, fine_n=0,
                         stratified=False, sss=spec.sss_amplitude > 0.0,
                         chunk=4096)
    return render_image(camera, scene, scene.light, lut, opts)


def generate_synthetic(spec, root, lut, identity_count=1, extract_gt_mesh=True):
    """Render the analytic scene into an on-disk dataset plus a GT bundle."""
    identities = []
    meshes = []
    for k in range(identity_count):
        ident_spec = spec if identity_count == 1 else _vary_spec(spec, k)
        scene = AnalyticScene(ident_spec)
        views = []
        for cam in synthetic_cameras(ident_spec):
            out = render_ground_truth(scene, cam, lut)
            mask = out["alpha"] > 0.5
            gt = {"diffuse": out["diffuse"], "specular": out["specular"],
                  "sss": out["sss"], "albedo": out["albedo"],
                  "normal": out["normal"] * 0.5 + 0.5}
            views.append(View(cam, out["rgb"], mask, gt))
        identities.append(Identity(f"id{k:02d}", views))
        if extract_gt_mesh:
            mesh = extract_mesh(scene.sdf, resolution=spec.mesh_resolution)
            mesh.save_obj(_ensure(root, f"gt_mesh_{k:02d}.obj"))
            meshes.append(mesh)
        np.save(_ensure(root, f"gt_light_{k:02d}.npy"),
                scene.light.coeffs if not tape.is_tensor(scene.light.coeffs)
                else scene.light.coeffs.data)
    save_dataset(root, identities, extra_meta={"seed": spec.seed,
                                               "identity_count": identity_count})
    return load_dataset(root, load_gt=True), meshes


def _ensure(root, name):
    os.makedirs(root, exist_ok=True)
    return os.path.join(root, name)


def _vary_spec(spec, k):
    from dataclasses import replace
    return replace(spec, seed=spec.seed + 1000 * (k + 1))


# -- metrics ------------------------------------------------------------------

def psnr(pred, gt, mask):
    """Peak signal-to-noise ratio in dB over the masked region (display space)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != gt.shape:
        raise UsageError("psnr shape mismatch")
    if not mask.any():
        raise UsageError("psnr needs a non-empty mask")
    mse = float(np.mean((pred[mask] - gt[mask]) ** 2))
    if mse < 1e-10:
        return 99.0
    return -10.0 * np.log10(mse)


def _luminance(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    return img @ np.array([0.2126, 0.7152, 0.0722])


def _gaussian_window(size=11, sigma=1.5):
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-ax ** 2 / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(pred, gt, mask, c1=0.01 ** 2, c2=0.03 ** 2):
    """Mean local SSIM of the luminance channel over masked window centers."""
    from scipy.ndimage import convolve

    lp = _luminance(pred)
    lg = _luminance(gt)
    if lp.shape != lg.shape:
        raise UsageError("ssim shape mismatch")
    if min(lp.shape) < 11:
        raise UsageError("ssim needs images at least 11x11")
    w = _gaussian_window()
    mu_p = convolve(lp, w, mode="nearest")
    mu_g = convolve(lg, w, mode="nearest")
    var_p = convolve(lp * lp, w, mode="nearest") - mu_p ** 2
    var_g = convolve(lg * lg, w, mode="nearest") - mu_g ** 2
    cov = convolve(lp * lg, w, mode="nearest") - mu_p * mu_g
    s = ((2 * mu_p * mu_g + c1) * (2 * cov + c2)
         / ((mu_p ** 2 + mu_g ** 2 + c1) * (var_p + var_g + c2)))
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise UsageError("ssim needs a non-empty mask")
    return float(np.mean(s[mask]))


def sample_mesh_surface(mesh, n, seed=0):
    """Area-weighted uniform surface samples."""
    if len(mesh.faces) == 0:
        raise UsageError("cannot sample an empty mesh")
    v = mesh.vertices
    tri = v[mesh.faces]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    area = 0.5 * np.linalg.norm(cross, axis=-1)
    if area.sum() <= 0:
        raise UsageError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(area), size=n, p=area / area.sum())
    u = rng.uniform(size=(n, 1))
    w = rng.uniform(size=(n, 1))
    flip = (u + w) > 1.0
    u[flip] = 1.0 - u[flip]
    w[flip] = 1.0 - w[flip]
    t = tri[pick]
    return t[:, 0] + u * (t[:, 1] - t[:, 0]) + w * (t[:, 2] - t[:, 0])


def chamfer(mesh_a, mesh_b, sample_n=10000, seed=0):
    """Symmetric mean nearest-neighbor distance (raw, x1000)."""
    from scipy.spatial import cKDTree

    if sample_n < 1000:
        raise UsageError("chamfer needs sample_n >= 1000")
    pa = sample_mesh_surface(mesh_a, sample_n, seed=seed)
    pb = sample_mesh_surface(mesh_b, sample_n, seed=seed + 1)
    d_ab = cKDTree(pb).query(pa)[0]
    d_ba = cKDTree(pa).query(pb)[0]
    raw = 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))
    return raw, raw * 1e3


def specular_failure_rate(spec_images, masks, threshold=1e-3):
    """Fraction of views whose masked mean specular luminance is below threshold."""
    spec_images = list(spec_images)
    masks = list(masks)
    if len(spec_images) != len(masks):
        raise UsageError("one mask per specular image required")
    empty = 0
    for img, m in zip(spec_images, masks):
        lum = _luminance(img)
        m = np.asarray(m, dtype=bool)
        mean = float(lum[m].mean()) if m.any() else 0.0
        if mean < threshold:
            empty += 1
    return empty / max(len(spec_images), 1)
