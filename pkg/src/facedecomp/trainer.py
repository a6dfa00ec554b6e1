"""Loss terms, radiance calibration, and the two training loops."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import tape
from .adam import AdamState
from .model import FaceModel, NeuralScene, create_identity_codes
from .params import save_checkpoint
from .renderer import RayBatch, RenderOptions, generate_rays, render_rays
from .tape import UsageError

BBOX = (-1.0, 1.0)


@dataclass(frozen=True)
class LossWeights:
    color: float = 1.0
    eikonal: float = 1e-1
    light_white: float = 5e-3
    spec_energy: float = 1.2e-2
    offset: float = 1e-3
    code: float = 500.0
    displacement: float = 1e-3
    scatter: float = 2e-3


@dataclass(frozen=True)
class StageConfig:
    stage: str = "one"                  # 'one' | 'two'
    epochs: int = 3000                  # one epoch = one 2048-ray batch step
    batch_rays: int = 2048
    lr: float = 1e-4
    template_lr_scale: float | None = None  # 0.2 stage one, 0.02 stage two
    seed: int = 0
    coarse_n: int = 64
    fine_n: int = 32
    eikonal_samples: int = 128
    sss: bool = True
    synergy: bool = True                # stage-2 cross-branch feature wiring
    calibration: bool = True            # refit the 3x3 radiance matrix per epoch
    sh_order: int = 10
    foreground_fraction: float = 0.8
    log_every: int = 50

    def __post_init__(self):
        if self.batch_rays < 1:
            raise UsageError("batch_rays must be >= 1")
        scale = self.resolved_template_lr_scale()
        if not (0.0 < scale <= 1.0):
            raise UsageError("template_lr_scale must be in (0, 1]")

    def resolved_template_lr_scale(self):
        if self.template_lr_scale is not None:
            return self.template_lr_scale
        return 0.2 if self.stage == "one" else 0.02


# -- loss parts ---------------------------------------------------------------

def loss_color(pred, gt):
    gt = np.asarray(gt) if not tape.is_tensor(gt) else gt
    if pred.shape != (gt.shape if not tape.is_tensor(gt) else gt.shape):
        raise UsageError(f"color loss shape mismatch: {pred.shape} vs {gt.shape}")
    return tape.absolute(pred - gt).mean()


def loss_eikonal(grad_norms):
    d = grad_norms - 1.0
    return (d * d).mean()


def loss_light_white(light):
    """Squared pairwise channel differences, averaged per coefficient."""
    c = light.coeff_tensor()
    rg = c[0] - c[1]
    gb = c[1] - c[2]
    rb = c[0] - c[2]
    return (rg * rg + gb * gb + rb * rb).mean()


def loss_spec_energy(spec):
    return tape.absolute(spec).mean()


def loss_code(z_geo, z_rfl):
    zg = tape.as_tensor(z_geo)
    zr = tape.as_tensor(z_rfl)
    return tape.sqrt((zg * zg).sum() + 1e-24) + tape.sqrt((zr * zr).sum() + 1e-24)


def loss_offset(raw):
    return tape.absolute(raw).mean()


loss_displacement = loss_offset
loss_scatter = loss_offset

STAGE1_PARTS = ("color", "eikonal", "light_white", "spec_energy", "offset", "code")
STAGE2_PARTS = STAGE1_PARTS + ("displacement", "scatter")


def total_loss(stage, parts, weights=LossWeights()):
    """Weighted sum of loss parts for the given stage."""
    names = STAGE1_PARTS if stage == "one" else STAGE2_PARTS
    missing = [n for n in names if n not in parts]
    if missing:
        raise UsageError(f"stage {stage} loss is missing parts: {missing}")
    out = None
    for n in names:
        term = getattr(weights, n) * tape.as_tensor(parts[n])
        out = term if out is None else out + term
    return out


# -- radiance calibration -----------------------------------------------------

@dataclass
class CalibrationMatrix:
    M: np.ndarray            # (3, 3), applied as rgb -> rgb @ M.T
    residual: float
    condition: float
    fallback: bool = False


def fit_calibration(pred, gt):
    """Closed-form 3x3 least squares aligning predicted to ground-truth rgb."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if pred.shape != gt.shape or len(pred) < 9:
        raise UsageError("calibration needs >= 9 paired rgb samples")
    A = pred.T @ pred
    cond = float(np.linalg.cond(A))
    if not np.isfinite(cond) or cond > 1e12:
        resid = float(np.mean((pred - gt) ** 2))
        return CalibrationMatrix(np.eye(3), resid, cond, fallback=True)
    M = np.linalg.solve(A, pred.T @ gt).T
    resid = float(np.mean((pred @ M.T - gt) ** 2))
    return CalibrationMatrix(M, resid, cond)


def apply_calibration(rgb, calib):
    if tape.is_tensor(rgb):
        shape = rgb.shape
        return tape.matmul(rgb.reshape((-1, 3)), calib.M.T).reshape(shape)
    return np.asarray(rgb) @ calib.M.T


# -- training loops -----------------------------------------------------------

class TrainingDiverged(RuntimeError):
    pass


def _pick_pixels(rng, view, count, fg_fraction):
    """Foreground-biased pixel sampling from one view's mask."""
    mask = np.asarray(view.mask, dtype=bool)
    h, w = mask.shape
    fg = np.flatnonzero(mask.ravel())
    bg = np.flatnonzero(~mask.ravel())
    n_fg = min(int(round(count * fg_fraction)), len(fg)) if len(fg) else 0
    n_bg = count - n_fg
    picks = []
    if n_fg:
        picks.append(rng.choice(fg, size=n_fg, replace=len(fg) < n_fg))
    if n_bg:
        pool = bg if len(bg) else fg
        picks.append(rng.choice(pool, size=n_bg, replace=len(pool) < n_bg))
    flat = np.concatenate(picks)
    return np.stack([flat % w, flat // w], axis=-1)  # (count, 2) as (u, v)


def _eikonal_points(rng, comp, rays, count):
    """Half uniform in the box, half Gaussian-perturbed near-surface points."""
    n_u = count // 2
    pts_u = rng.uniform(BBOX[0], BBOX[1], size=(n_u, 3))
    w = comp["weights"].data
    ts = comp["ts"]
    idx = np.argmax(w, axis=-1)
    t_star = np.take_along_axis(ts, idx[:, None], axis=-1)[:, 0]
    surf = rays.origins + t_star[:, None] * rays.dirs
    take = rng.integers(0, len(surf), size=count - n_u)
    pts_s = surf[take] + 0.05 * rng.standard_normal((count - n_u, 3))
    return np.clip(np.concatenate([pts_u, pts_s]), BBOX[0], BBOX[1])


def _loss_parts(scene, comp, gt_rgb, light, eik_points, stage, opts, calib=None):
    pred = comp["rgb"]
    if calib is not None:
        pred = apply_calibration(pred, calib)
    aux = comp["aux"]
    parts = {
        "color": loss_color(pred, gt_rgb),
        "eikonal": loss_eikonal(scene.eikonal_residual(eik_points)),
        "light_white": loss_light_white(light),
        "spec_energy": loss_spec_energy(aux["specular_samples"]),
        "offset": loss_offset(aux["raw_offset"]),
        "code": loss_code(scene.z_geo, scene.z_rfl),
    }
    if stage == "two":
        parts["displacement"] = loss_displacement(aux["displacement"])
        parts["scatter"] = (loss_scatter(aux["sss_samples"]) if opts.sss
                            else tape.Tensor(0.0))
    return parts


def _check_finite(loss_val, parts, epoch, batch, out_dir):
    if np.isfinite(loss_val):
        return
    dump = None
    if out_dir is not None:
        dump = os.path.join(out_dir, f"nan_batch_{epoch}.npz")
        np.savez(dump, **batch)
    vals = {k: float(v.data) for k, v in parts.items()}
    raise TrainingDiverged(
        f"non-finite loss at epoch {epoch}: {vals}" +
        (f" (batch dumped to {dump})" if dump else ""))


def _write_history(out_dir, history, name):
    if out_dir is None or not history:
        return
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(history[0]))
        writer.writeheader()
        writer.writerows(history)


def _train_loop(model, dataset, lut, config, weights, out_dir, subject_identity=None):
    stage = config.stage
    store = model.store
    opt = AdamState(store, lr=config.lr)
    opts = RenderOptions(coarse_n=config.coarse_n, fine_n=config.fine_n,
                         sss=(config.sss and stage == "two"))
    rng = np.random.default_rng(config.seed)
    identities = ([subject_identity] if subject_identity is not None
                  else list(range(len(dataset.identities))))
    history = []
    for epoch in range(config.epochs):
        ident = identities[int(rng.integers(len(identities)))]
        views = dataset.identities[ident].views
        view = views[int(rng.integers(len(views)))]
        pixels = _pick_pixels(rng, view, config.batch_rays, config.foreground_fraction)
        rays = generate_rays(view.camera, pixels)
        scene = NeuralScene.for_identity(model, ident, sh_order=config.sh_order,
                                         synergy=config.synergy)
        light = scene.identity_light(ident)
        step_opts = replace(opts, seed=int(_mix_seed(config.seed, epoch)))
        comp = render_rays(rays, scene, light, lut, step_opts, create_graph=True)
        gt = np.asarray(view.image).reshape(-1, 3)[rays.pixel_ids]

        calib = None
        if config.calibration and stage == "two":
            with tape.no_grad():
                calib = fit_calibration(comp["rgb"].data, gt)
        eik = _eikonal_points(rng, comp, rays, config.eikonal_samples)
        parts = _loss_parts(scene, comp, gt, light, eik, stage, step_opts, calib)
        loss = total_loss(stage, parts, weights)

        store.zero_grads()
        tape.backward(loss)
        batch = {"pixels": pixels, "gt": gt, "identity": np.array(ident)}
        _check_finite(float(loss.data), parts, epoch, batch, out_dir)
        opt.adam_step()

        row = {"epoch": epoch, "total": float(loss.data)}
        row.update({k: float(v.data) for k, v in parts.items()})
        history.append(row)
    _write_history(out_dir, history, f"loss_stage{stage}.csv")
    return history


def _mix_seed(seed, epoch):
    return (np.uint64(seed) * np.uint64(0x9E3779B1) + np.uint64(epoch)) & np.uint64(0x7FFFFFFF)


def train_stage1(dataset, lut, config, geo_config=None, rfl_config=None,
                 weights=LossWeights(), out_dir=None, ckpt_path=None, model=None):
    """Multi-identity auto-decoder training of the shared template.

    Returns (model, history). A fresh FaceModel is built unless one is passed
    (the caller may pre-shrink network configs for small runs).
    """
    if len(dataset.identities) < 2:
        raise UsageError("stage-1 training needs at least 2 identities")
    if config.stage != "one":
        raise UsageError("config.stage must be 'one'")
    if model is None:
        from .geometry import GeometryConfig
        from .reflectance import ReflectanceConfig
        store = _new_store()
        model = FaceModel(store, geo_config or GeometryConfig(),
                          rfl_config or ReflectanceConfig(), stage="one",
                          seed=config.seed,
                          template_lr_scale=config.resolved_template_lr_scale())
        for i in range(len(dataset.identities)):
            create_identity_codes(store, i, z_dim=model.geometry.config.z_dim,
                                  sh_order=config.sh_order, seed=config.seed + 100 + i)
    history = _train_loop(model, dataset, lut, config, weights, out_dir)
    if ckpt_path is not None:
        save_checkpoint(ckpt_path, model.store, meta={"stage": "one"})
    return model, history


def train_stage2(dataset, lut, config, model, subject_identity="subject",
                 weights=LossWeights(), out_dir=None, ckpt_path=None, sss=None):
    """Single-subject fitting on top of a stage-1 model.

    `model` is a FaceModel whose store holds the stage-1 template; fresh
    stage-2 nets and subject codes are created here, and template nets are
    damped to the stage-2 learning-rate scale.
    """
    if config.stage != "two":
        raise UsageError("config.stage must be 'two'")
    store = model.store
    use_sss = config.sss if sss is None else sss
    if model.stage != "two":
        model.enter_stage_two(seed=config.seed + 7, sss=use_sss)
    if f"id.{subject_identity}.z_geo" not in store:
        create_identity_codes(store, subject_identity,
                              z_dim=model.geometry.config.z_dim,
                              sh_order=config.sh_order, seed=config.seed + 300)
    scale = config.resolved_template_lr_scale()
    for name in store.names():
        if ".tpl." in name:
            store.set_lr_scale(name, scale)

    class _SubjectView:
        def __init__(self, views):
            self.views = views

    class _SubjectDataset:
        def __init__(self, views):
            self.identities = {subject_identity: _SubjectView(views)}

    views = dataset.identities[0].views if hasattr(dataset, "identities") else dataset
    wrapped = _SubjectDataset(views)
    cfg = config if use_sss == config.sss else replace(config, sss=use_sss)
    history = _train_loop(model, wrapped, lut, cfg, weights, out_dir,
                          subject_identity=subject_identity)
    if ckpt_path is not None:
        save_checkpoint(ckpt_path, store, meta={"stage": "two",
                                                "subject": str(subject_identity)})
    return model, history


def _new_store():
    from .params import ParamStore
    return ParamStore()
