"""Command-line entry point: reproducible workflows over all modules.

Every artifact-producing run writes a resolved-config snapshot (including the
seed) into its output directory, so it can be rerun bitwise-identically.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys

import numpy as np

from .mlp import ConfigurationError
from .tape import UsageError

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

DEFAULT_CONFIG = {
    "seed": 0,
    "loss": {
        "color": 1.0, "eikonal": 1e-1, "light_white": 5e-3,
        "spec_energy": 1.2e-2, "offset": 1e-3, "code": 500.0,
        "displacement": 1e-3, "scatter": 2e-3,
    },
    "model": {
        "sh_order": 10,
        "z_dim": 128,
        "offset_weight": 0.05,
        "w_albedo_init": 0.4,
        "w_other_init": 0.9,
        "scatter_weight_init": 0.1,
        "dfm_layers": 6, "dfm_width": 256,
        "geo_layers": 8, "geo_width": 256,
        "dis_layers": 4, "dis_width": 256,
        "rfl_layers": 8, "rfl_width": 256,
        "ofs_layers": 8, "ofs_width": 256,
        "scatter_layers": 4, "scatter_width": 128,
        "f_def_dim": 128, "f_geo_dim": 128, "f_dis_dim": 64, "f_rfl_dim": 128,
        "z_lgt_dim": 32,
        "sphere_radius": 0.5,
        "beta_init": 0.1,
    },
    "stage1": {
        "epochs": 3000, "batch_rays": 2048, "lr": 1e-4,
        "template_lr_scale": 0.2, "coarse_n": 64, "fine_n": 32,
        "eikonal_samples": 128, "calibration": False, "sss": False,
        "foreground_fraction": 0.8,
    },
    "stage2": {
        "epochs": 3000, "batch_rays": 2048, "lr": 1e-4,
        "template_lr_scale": 0.02, "coarse_n": 64, "fine_n": 32,
        "eikonal_samples": 128, "calibration": True, "sss": True,
        "foreground_fraction": 0.8,
    },
    "render": {"coarse_n": 64, "fine_n": 32, "chunk": 2048, "sss": True},
    "lut": {"grid": 64, "sample_count": 4096, "fit_tol": 0.02,
            "fit_iters": 20000},
    "synth": {
        "view_count": 5, "resolution": 64, "samples_per_ray": 256,
        "identity_count": 1, "mesh_resolution": 512, "extract_mesh": True,
        "sphere_radius": 0.32, "bump_count": 5, "bump_amplitude": 0.05,
        "azimuth_span_deg": 120.0, "camera_distance": 1.6,
    },
}

_RANGE_CHECKS = {
    "stage1.batch_rays": lambda v: v >= 1,
    "stage2.batch_rays": lambda v: v >= 1,
    "stage1.epochs": lambda v: v >= 1,
    "stage2.epochs": lambda v: v >= 1,
    "stage1.lr": lambda v: v > 0,
    "stage2.lr": lambda v: v > 0,
    "stage1.template_lr_scale": lambda v: 0 < v <= 1,
    "stage2.template_lr_scale": lambda v: 0 < v <= 1,
    "model.sh_order": lambda v: v >= 0,
    "lut.sample_count": lambda v: v >= 1024,
    "synth.resolution": lambda v: v >= 8,
}


class ConfigError(ValueError):
    pass


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, val in override.items():
        fpath = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {fpath}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{fpath}: expected a table, got {type(val).__name__}")
            out[key] = _merge(base[key], val, fpath)
        else:
            out[key] = _coerce(fpath, base[key], val)
    return out


def _coerce(path, default, val):
    if isinstance(default, bool):
        if not isinstance(val, bool):
            raise ConfigError(f"{path}: expected a boolean, got {val!r}")
        return val
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(val, bool) or not isinstance(val, (int, float)) or val != int(val):
            raise ConfigError(f"{path}: expected an integer, got {val!r}")
        return int(val)
    if isinstance(default, float):
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {val!r}")
        return float(val)
    if isinstance(default, str):
        if not isinstance(val, str):
            raise ConfigError(f"{path}: expected a string, got {val!r}")
        return val
    raise ConfigError(f"{path}: unsupported config value {val!r}")


def _apply_override(cfg, item):
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        val = raw  # bare strings allowed
    node = {}
    cursor = node
    parts = key.split(".")
    for p in parts[:-1]:
        cursor[p] = {}
        cursor = cursor[p]
    cursor[parts[-1]] = val
    return _merge(cfg, node)


def resolve_config(path=None, overrides=()):
    """Defaults <- JSON file <- key=value overrides, fully validated."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        with open(path) as f:
            loaded = json.load(f)
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: config root must be a JSON object")
        cfg = _merge(cfg, loaded)
    for item in overrides or ():
        cfg = _apply_override(cfg, item)
    for fpath, check in _RANGE_CHECKS.items():
        node = cfg
        for part in fpath.split("."):
            node = node[part]
        if not check(node):
            raise ConfigError(f"{fpath}: value {node!r} out of range")
    return cfg


def write_snapshot(out_dir, cfg, command):
    os.makedirs(out_dir, exist_ok=True)
    snap = {"command": command, "seed": cfg["seed"], "config": cfg}
    with open(os.path.join(out_dir, "resolved_config.json"), "w") as f:
        json.dump(snap, f, indent=1, sort_keys=True)


# -- config -> domain objects -------------------------------------------------

def _geo_config(m):
    from .geometry import GeometryConfig
    return GeometryConfig(
        dfm_layers=m["dfm_layers"], dfm_width=m["dfm_width"],
        geo_layers=m["geo_layers"], geo_width=m["geo_width"],
        geo_skip=frozenset({m["geo_layers"] // 2}) if m["geo_layers"] >= 4 else frozenset(),
        dis_layers=m["dis_layers"], dis_width=m["dis_width"],
        z_dim=m["z_dim"], f_def_dim=m["f_def_dim"], f_geo_dim=m["f_geo_dim"],
        f_dis_dim=m["f_dis_dim"], f_rfl_dim=m["f_rfl_dim"],
        sphere_radius=m["sphere_radius"], beta_init=m["beta_init"])


def _rfl_config(m):
    from .reflectance import ReflectanceConfig
    return ReflectanceConfig(
        rfl_layers=m["rfl_layers"], rfl_width=m["rfl_width"],
        ofs_layers=m["ofs_layers"], ofs_width=m["ofs_width"],
        scatter_layers=m["scatter_layers"], scatter_width=m["scatter_width"],
        z_dim=m["z_dim"], f_rfl_dim=m["f_rfl_dim"], f_def_dim=m["f_def_dim"],
        f_geo_dim=m["f_geo_dim"], f_dis_dim=m["f_dis_dim"],
        z_lgt_dim=m["z_lgt_dim"],
        stage1_offset_weight=m["offset_weight"],
        scatter_weight_init=m["scatter_weight_init"],
        w_albedo_init=m["w_albedo_init"], w_other_init=m["w_other_init"],
        sh_coeff_count=3 * (m["sh_order"] + 1) ** 2)


def _loss_weights(cfg):
    from .trainer import LossWeights
    return LossWeights(**cfg["loss"])


def _stage_config(cfg, stage):
    from .trainer import StageConfig
    s = cfg["stage1" if stage == "one" else "stage2"]
    return StageConfig(stage=stage, epochs=s["epochs"], batch_rays=s["batch_rays"],
                       lr=s["lr"], template_lr_scale=s["template_lr_scale"],
                       seed=cfg["seed"], coarse_n=s["coarse_n"], fine_n=s["fine_n"],
                       eikonal_samples=s["eikonal_samples"], sss=s["sss"],
                       calibration=s["calibration"],
                       sh_order=cfg["model"]["sh_order"],
                       foreground_fraction=s["foreground_fraction"])


def _render_options(cfg, **kw):
    from .renderer import RenderOptions
    r = cfg["render"]
    return RenderOptions(coarse_n=r["coarse_n"], fine_n=r["fine_n"],
                         seed=cfg["seed"], chunk=r["chunk"], sss=r["sss"], **kw)


def _synth_spec(cfg):
    from .scenekit import SyntheticSceneSpec
    s = cfg["synth"]
    return SyntheticSceneSpec(seed=cfg["seed"], view_count=s["view_count"],
                              resolution=s["resolution"],
                              samples_per_ray=s["samples_per_ray"],
                              mesh_resolution=s["mesh_resolution"],
                              sphere_radius=s["sphere_radius"],
                              bump_count=s["bump_count"],
                              bump_amplitude=s["bump_amplitude"],
                              azimuth_span_deg=s["azimuth_span_deg"],
                              camera_distance=s["camera_distance"])


def _require(path, what):
    if path is None or not os.path.exists(path):
        raise UsageError(f"missing {what}: {path}")
    return path


def _load_model(ckpt_path):
    from .model import FaceModel
    from .params import load_checkpoint
    store, _, meta = load_checkpoint(_require(ckpt_path, "checkpoint"))
    cfg = resolve_config()
    cfg = _merge(cfg, {"model": meta.get("model", {})})
    model = FaceModel(store, _geo_config(cfg["model"]), _rfl_config(cfg["model"]),
                      create=False)
    if "geo.dis.w0" in store:
        model.geometry.stage = "two"
        model.reflectance.stage = "two"
    return model, meta, cfg["model"]


def _load_lut(path):
    from .lighting import load_lut
    return load_lut(_require(path, "split-sum LUT asset"))


# -- subcommands --------------------------------------------------------------

def cmd_synth(args, cfg):
    from .scenekit import generate_synthetic
    write_snapshot(args.out, cfg, "synth")
    lut = _load_lut(args.lut) if args.lut else _bake_default_lut(cfg, fit=False)
    spec = _synth_spec(cfg)
    generate_synthetic(spec, args.out, lut,
                       identity_count=cfg["synth"]["identity_count"],
                       extract_gt_mesh=cfg["synth"]["extract_mesh"])
    print(f"dataset written to {args.out}")
    return EXIT_OK


def _bake_default_lut(cfg, fit=True):
    from .lighting import bake_lut, fit_lut_mlp
    lut = bake_lut(sample_count=cfg["lut"]["sample_count"], grid=cfg["lut"]["grid"],
                   seed=cfg["seed"])
    if fit:
        fit_lut_mlp(lut, max_iters=cfg["lut"]["fit_iters"],
                    tol=cfg["lut"]["fit_tol"], seed=cfg["seed"])
    return lut


def cmd_lut_bake(args, cfg):
    from .lighting import save_lut
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    write_snapshot(out_dir, cfg, "lut-bake")
    lut = _bake_default_lut(cfg, fit=True)
    save_lut(args.out, lut)
    print(f"LUT written to {args.out}")
    return EXIT_OK


def cmd_train_template(args, cfg):
    from .scenekit import load_dataset
    from .trainer import train_stage1
    write_snapshot(args.out, cfg, "train-template")
    ds = load_dataset(_require(args.data, "dataset"))
    lut = _load_lut(args.lut)
    ckpt = os.path.join(args.out, "template.ckpt")
    train_stage1(ds, lut, _stage_config(cfg, "one"),
                 geo_config=_geo_config(cfg["model"]),
                 rfl_config=_rfl_config(cfg["model"]),
                 weights=_loss_weights(cfg), out_dir=args.out, ckpt_path=ckpt)
    _stamp_model_meta(ckpt, cfg)
    print(f"stage-1 checkpoint written to {ckpt}")
    return EXIT_OK


def _stamp_model_meta(ckpt, cfg):
    from .params import load_checkpoint, save_checkpoint
    store, adam, meta = load_checkpoint(ckpt)
    meta["model"] = cfg["model"]
    save_checkpoint(ckpt, store, adam=adam, meta=meta)


def cmd_train_subject(args, cfg):
    from .scenekit import load_dataset
    from .trainer import train_stage2
    write_snapshot(args.out, cfg, "train-subject")
    ds = load_dataset(_require(args.data, "dataset"))
    lut = _load_lut(args.lut)
    model, meta, model_cfg = _load_model(args.ckpt)
    cfg = _merge(cfg, {"model": model_cfg})
    ckpt = os.path.join(args.out, "subject.ckpt")
    train_stage2(ds, lut, _stage_config(cfg, "two"), model,
                 weights=_loss_weights(cfg), out_dir=args.out, ckpt_path=ckpt)
    _stamp_model_meta(ckpt, cfg)
    print(f"stage-2 checkpoint written to {ckpt}")
    return EXIT_OK


def _scene_from_args(args, cfg):
    from .model import NeuralScene
    from .scenekit import load_dataset
    model, meta, model_cfg = _load_model(args.ckpt)
    identity = getattr(args, "identity", None)
    if identity is None:
        identity = meta.get("subject", "subject")
    else:
        try:
            identity = int(identity)
        except ValueError:
            pass
    scene = NeuralScene.for_identity(model, identity, sh_order=model_cfg["sh_order"])
    light = scene.identity_light(identity)
    ds = load_dataset(_require(args.data, "dataset"))
    view = ds.identities[getattr(args, "dataset_identity", 0)].views[args.view]
    return scene, light, view, model_cfg


def _save_render(out_dir, imgs, tag="render"):
    from .scenekit import save_pfm, save_png, srgb_encode
    os.makedirs(out_dir, exist_ok=True)
    for key in ("rgb", "diffuse", "specular", "sss"):
        save_pfm(os.path.join(out_dir, f"{tag}_{key}.pfm"), imgs[key])
    save_png(os.path.join(out_dir, f"{tag}_rgb.png"), srgb_encode(imgs["rgb"]))


def cmd_render(args, cfg):
    from .renderer import render_image
    write_snapshot(args.out, cfg, "render")
    scene, light, view, _ = _scene_from_args(args, cfg)
    lut = _load_lut(args.lut)
    imgs = render_image(view.camera, scene, light, lut, _render_options(cfg))
    _save_render(args.out, imgs)
    print(f"render written to {args.out}")
    return EXIT_OK


def cmd_relight(args, cfg):
    from .lighting import SHLight, env_to_sh
    from .renderer import relight
    from .scenekit import load_pfm
    write_snapshot(args.out, cfg, "relight")
    scene, light, view, model_cfg = _scene_from_args(args, cfg)
    lut = _load_lut(args.lut)
    order = model_cfg["sh_order"]
    if args.env.endswith(".npy"):
        new_light = SHLight(order, np.load(_require(args.env, "light coefficients")))
    else:
        new_light = env_to_sh(load_pfm(_require(args.env, "environment map")), order)
    imgs = relight(view.camera, scene, new_light, lut, _render_options(cfg))
    _save_render(args.out, imgs, tag="relight")
    print(f"relit render written to {args.out}")
    return EXIT_OK


def cmd_edit_specular(args, cfg):
    from .renderer import edit_specular
    write_snapshot(args.out, cfg, "edit-specular")
    scene, light, view, _ = _scene_from_args(args, cfg)
    lut = _load_lut(args.lut)
    imgs = edit_specular(view.camera, scene, light, lut, _render_options(cfg),
                         args.gain)
    _save_render(args.out, imgs, tag="edit")
    print(f"specular-edited render written to {args.out}")
    return EXIT_OK


def cmd_extract_mesh(args, cfg):
    from .geometry import extract_mesh
    from .model import NeuralScene
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    write_snapshot(out_dir, cfg, "extract-mesh")
    model, meta, model_cfg = _load_model(args.ckpt)
    identity = args.identity if args.identity is not None else meta.get("subject", "subject")
    try:
        identity = int(identity)
    except (TypeError, ValueError):
        pass
    scene = NeuralScene.for_identity(model, identity, sh_order=model_cfg["sh_order"])
    mesh = extract_mesh(scene.sdf_np, resolution=args.resolution)
    mesh.save_obj(args.out)
    print(f"mesh with {len(mesh.vertices)} vertices written to {args.out}")
    return EXIT_OK


def cmd_eval(args, cfg):
    from .geometry import TriangleMesh, extract_mesh
    from .renderer import render_image
    from .scenekit import chamfer, load_dataset, psnr, specular_failure_rate, srgb_encode, ssim
    from .model import NeuralScene
    write_snapshot(args.out, cfg, "eval")
    model, meta, model_cfg = _load_model(args.ckpt)
    identity = meta.get("subject", "subject")
    scene = NeuralScene.for_identity(model, identity, sh_order=model_cfg["sh_order"])
    light = scene.identity_light(identity)
    lut = _load_lut(args.lut)
    ds = load_dataset(_require(args.data, "dataset"), load_gt=True)
    views = ds.identities[0].views
    rows = []
    spec_aovs, masks = [], []
    for i, view in enumerate(views):
        imgs = render_image(view.camera, scene, light, lut, _render_options(cfg))
        pred = srgb_encode(imgs["rgb"])
        gt = srgb_encode(view.image)
        rows.append({"view": i, "psnr": psnr(pred, gt, view.mask),
                     "ssim": ssim(pred, gt, view.mask)})
        spec_aovs.append(imgs["specular"])
        masks.append(view.mask)
    report = {"views": rows,
              "psnr_mean": float(np.mean([r["psnr"] for r in rows])),
              "ssim_mean": float(np.mean([r["ssim"] for r in rows])),
              "specular_failure_rate": specular_failure_rate(spec_aovs, masks)}
    gt_mesh_path = os.path.join(args.data, "gt_mesh_00.obj")
    if os.path.exists(gt_mesh_path):
        pred_mesh = extract_mesh(scene.sdf_np, resolution=args.resolution)
        raw, scaled = chamfer(pred_mesh, TriangleMesh.load_obj(gt_mesh_path),
                              sample_n=10000, seed=cfg["seed"])
        report["chamfer"] = raw
        report["chamfer_x1000"] = scaled
    with open(os.path.join(args.out, "eval.json"), "w") as f:
        json.dump(report, f, indent=1, sort_keys=True)
    print(json.dumps(report, indent=1, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args, cfg):
    from .gradcheck import run_all
    results = run_all(seed=cfg["seed"])
    ok = True
    for name, err, passed in results:
        print(f"{name}: max rel err {err:.3e} [{'pass' if passed else 'FAIL'}]")
        ok = ok and passed
    return EXIT_OK if ok else EXIT_VALIDATION


def build_parser():
    p = argparse.ArgumentParser(prog="facedecomp",
                                description="two-stage face decomposition toolkit")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   dest="overrides", help="dotted-path config override")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, **flags):
        sp = sub.add_parser(name)
        for flag, kw in flags.items():
            sp.add_argument(f"--{flag}", **kw)
        sp.set_defaults(fn=fn)
        return sp

    add("synth", cmd_synth, out={"required": True}, lut={"default": None})
    add("lut-bake", cmd_lut_bake, out={"required": True})
    add("train-template", cmd_train_template, data={"required": True},
        lut={"required": True}, out={"required": True})
    add("train-subject", cmd_train_subject, data={"required": True},
        lut={"required": True}, ckpt={"required": True}, out={"required": True})
    add("render", cmd_render, ckpt={"required": True}, lut={"required": True},
        data={"required": True}, out={"required": True},
        view={"type": int, "default": 0}, identity={"default": None})
    add("relight", cmd_relight, ckpt={"required": True}, lut={"required": True},
        data={"required": True}, out={"required": True}, env={"required": True},
        view={"type": int, "default": 0}, identity={"default": None})
    add("edit-specular", cmd_edit_specular, ckpt={"required": True},
        lut={"required": True}, data={"required": True}, out={"required": True},
        gain={"type": float, "required": True},
        view={"type": int, "default": 0}, identity={"default": None})
    add("extract-mesh", cmd_extract_mesh, ckpt={"required": True},
        out={"required": True}, resolution={"type": int, "default": 256},
        identity={"default": None})
    add("eval", cmd_eval, ckpt={"required": True}, lut={"required": True},
        data={"required": True}, out={"required": True},
        resolution={"type": int, "default": 128})
    add("gradcheck", cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_VALIDATION if e.code not in (0, None) else EXIT_OK
    try:
        cfg = resolve_config(args.config, args.overrides)
        return args.fn(args, cfg)
    except (ConfigError, ConfigurationError, UsageError, FileNotFoundError,
            ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as e:  # noqa: BLE001 - runtime failures map to exit 2
        print(f"runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
