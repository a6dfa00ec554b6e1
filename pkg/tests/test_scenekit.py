import os

import numpy as np
import pytest

from facedecomp.geometry import TriangleMesh
from facedecomp.renderer import look_at_camera
from facedecomp.scenekit import (AnalyticScene, Identity, SyntheticSceneSpec,
                                 View, chamfer, generate_synthetic,
                                 load_dataset, load_pfm, load_png, psnr,
                                 sample_mesh_surface, save_dataset, save_pfm,
                                 save_png, specular_failure_rate, srgb_decode,
                                 srgb_encode, ssim, synthetic_cameras)
from facedecomp.tape import UsageError


def test_srgb_known_value_and_roundtrip():
    assert abs(srgb_encode(0.5) - 0.7353569830524495) < 1e-12
    assert abs(srgb_decode(srgb_encode(0.5)) - 0.5) < 1e-12
    x = np.random.default_rng(0).uniform(0.0, 1.0, size=(64,)).astype(np.float32)
    back = srgb_decode(srgb_encode(x)).astype(np.float32)
    # round trip is exact to float32 resolution (1 ulp)
    assert np.max(np.abs(back - x)) <= np.max(np.spacing(x))


def test_pfm_roundtrip_bitwise(tmp_path):
    img = np.random.default_rng(1).uniform(-2.0, 5.0, size=(6, 9, 3)).astype(np.float32)
    path = os.path.join(tmp_path, "x.pfm")
    save_pfm(path, img)
    back = load_pfm(path)
    assert np.array_equal(back.astype(np.float32), img)
    with pytest.raises(UsageError):
        save_pfm(path, np.zeros((4, 4)))


def test_pfm_rejects_garbage(tmp_path):
    path = os.path.join(tmp_path, "bad.pfm")
    with open(path, "wb") as f:
        f.write(b"Pf\n4 4\n-1.0\n")
    with pytest.raises(ValueError):
        load_pfm(path)


def test_png_roundtrip(tmp_path):
    img = np.random.default_rng(2).uniform(size=(8, 8, 3))
    path = os.path.join(tmp_path, "x.png")
    save_png(path, img)
    back = load_png(path)
    assert np.max(np.abs(back - img)) <= 0.5 / 255.0 + 1e-12


def _tiny_dataset(res=8, n_views=2):
    cam = [look_at_camera((0, 0, 1.5 + 0.1 * i), (0, 0, 0), width=res, height=res)
           for i in range(n_views)]
    rng = np.random.default_rng(3)
    views = [View(c, rng.uniform(size=(res, res, 3)),
                  rng.uniform(size=(res, res)) > 0.3,
                  {"albedo": rng.uniform(size=(res, res, 3))}) for c in cam]
    return [Identity("id00", views)]


def test_dataset_roundtrip(tmp_path):
    idents = _tiny_dataset()
    root = os.path.join(tmp_path, "ds")
    save_dataset(root, idents)
    ds = load_dataset(root, load_gt=True)
    assert len(ds.identities) == 1
    assert ds.manifest["version"] == "facedecomp-ds-v1"
    for orig, back in zip(idents[0].views, ds.identities[0].views):
        assert np.array_equal(back.image.astype(np.float32),
                              orig.image.astype(np.float32))
        assert np.array_equal(back.mask, orig.mask)
        assert np.array_equal(back.gt["albedo"].astype(np.float32),
                              orig.gt["albedo"].astype(np.float32))
        assert np.allclose(back.camera.world_to_cam, orig.camera.world_to_cam)


def test_dataset_save_deterministic(tmp_path):
    idents = _tiny_dataset()
    paths = []
    for tag in ("a", "b"):
        root = os.path.join(tmp_path, tag)
        save_dataset(root, idents)
        paths.append(root)
    for rel in ("manifest.json", "images/0000.pfm", "masks/0000.png"):
        with open(os.path.join(paths[0], rel), "rb") as fa, \
             open(os.path.join(paths[1], rel), "rb") as fb:
            assert fa.read() == fb.read(), rel


def test_dataset_missing_file_named(tmp_path):
    root = os.path.join(tmp_path, "ds")
    save_dataset(root, _tiny_dataset())
    victim = os.path.join(root, "images", "0001.pfm")
    os.remove(victim)
    with pytest.raises(FileNotFoundError, match="0001.pfm"):
        load_dataset(root)
    with pytest.raises(FileNotFoundError):
        load_dataset(os.path.join(tmp_path, "nowhere"))


def test_psnr_examples():
    gt = np.zeros((4, 4, 3))
    pred = np.full((4, 4, 3), 0.1)  # mse 0.01 -> 20 dB
    mask = np.ones((4, 4), dtype=bool)
    assert abs(psnr(pred, gt, mask) - 20.0) < 1e-9
    assert psnr(gt, gt, mask) == 99.0
    with pytest.raises(UsageError):
        psnr(pred, gt, np.zeros((4, 4), dtype=bool))
    with pytest.raises(UsageError):
        psnr(pred, np.zeros((3, 3, 3)), mask)


def test_psnr_mixed_example():
    # pixels at 0.3 error on 3 of 10 samples: mse = 0.3^2 * 0.3
    gt = np.zeros((10, 1, 3))
    pred = np.zeros((10, 1, 3))
    pred[:3] = 0.3
    mask = np.ones((10, 1), dtype=bool)
    assert abs(psnr(pred, gt, mask) - (-10 * np.log10(0.09 * 0.3))) < 1e-9


def test_ssim_self_and_shift():
    rng = np.random.default_rng(4)
    img = rng.uniform(0.2, 0.8, size=(24, 24, 3))
    mask = np.ones((24, 24), dtype=bool)
    assert abs(ssim(img, img, mask) - 1.0) < 1e-12
    # small uniform brightness shift barely moves structural similarity
    assert abs(ssim(img, np.clip(img + 0.02, 0, 1), mask) - 1.0) < 0.02
    # inverted image is structurally opposite
    assert ssim(img, 1.0 - img, mask) < 0.0
    with pytest.raises(UsageError):
        ssim(img[:8, :8], img[:8, :8], mask[:8, :8])


def test_sample_mesh_surface_on_triangle():
    tri = TriangleMesh(np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1.0, 0]]),
                       np.array([[0, 1, 2]]))
    p = sample_mesh_surface(tri, 500, seed=5)
    assert np.all(p[:, 2] == 0.0)
    assert np.all(p[:, 0] >= 0) and np.all(p[:, 1] >= 0)
    assert np.all(p[:, 0] + p[:, 1] <= 1.0 + 1e-12)
    with pytest.raises(UsageError):
        sample_mesh_surface(TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), int)), 10)


def _square(offset):
    v = np.array([[0.0, 0, 0], [1.0, 0, 0], [1.0, 1.0, 0], [0.0, 1.0, 0]]) + offset
    return TriangleMesh(v, np.array([[0, 1, 2], [0, 2, 3]]))


def test_chamfer_separated_squares():
    """Unit squares one unit apart along z: distance is exactly 1."""
    raw, scaled = chamfer(_square([0, 0, 0.0]), _square([0, 0, 1.0]),
                          sample_n=2000, seed=0)
    assert abs(raw - 1.0) < 1e-9
    assert abs(scaled - 1000.0) < 1e-6
    with pytest.raises(UsageError):
        chamfer(_square([0, 0, 0]), _square([0, 0, 0]), sample_n=100)


def test_chamfer_matches_brute_force():
    rng = np.random.default_rng(6)
    a = TriangleMesh(rng.uniform(-1, 1, (6, 3)), np.array([[0, 1, 2], [3, 4, 5]]))
    b = TriangleMesh(rng.uniform(-1, 1, (6, 3)), np.array([[0, 1, 2], [3, 4, 5]]))
    raw, _ = chamfer(a, b, sample_n=1000, seed=1)
    pa = sample_mesh_surface(a, 1000, seed=1)
    pb = sample_mesh_surface(b, 1000, seed=2)
    d_ab = np.min(np.linalg.norm(pa[:, None] - pb[None], axis=-1), axis=1).mean()
    d_ba = np.min(np.linalg.norm(pb[:, None] - pa[None], axis=-1), axis=1).mean()
    assert abs(raw - 0.5 * (d_ab + d_ba)) < 1e-12


def test_specular_failure_rate():
    bright = np.full((8, 8, 3), 0.1)
    dark = np.full((8, 8, 3), 1e-5)
    mask = np.ones((8, 8), dtype=bool)
    assert specular_failure_rate([bright, dark], [mask, mask]) == 0.5
    assert specular_failure_rate([bright], [mask]) == 0.0
    with pytest.raises(UsageError):
        specular_failure_rate([bright], [mask, mask])


def test_analytic_scene_sdf_and_cameras():
    spec = SyntheticSceneSpec(seed=7, resolution=16, view_count=3)
    scene = AnalyticScene(spec)
    # exact gradient vs finite differences
    x = np.random.default_rng(8).uniform(-0.5, 0.5, size=(20, 3))
    g = scene.sdf_grad(x)
    h = 1e-6
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        fd = (scene.sdf(x + e) - scene.sdf(x - e)) / (2 * h)
        assert np.max(np.abs(g[:, k] - fd)) < 1e-6
    cams = synthetic_cameras(spec)
    assert len(cams) == 3
    for cam in cams:
        assert abs(np.linalg.norm(cam.cam_to_world[:3, 3]) - spec.camera_distance) < 1e-9
    with pytest.raises(ValueError):
        AnalyticScene(SyntheticSceneSpec(sphere_radius=0.9, bump_amplitude=0.2))


def test_generate_synthetic_end_to_end(tmp_path, small_lut):
    spec = SyntheticSceneSpec(seed=9, resolution=24, view_count=2,
                              samples_per_ray=64, mesh_resolution=48)
    root = os.path.join(tmp_path, "synth")
    ds, meshes = generate_synthetic(spec, root, small_lut)
    assert len(ds.identities) == 1 and len(ds.identities[0].views) == 2
    assert len(meshes) == 1
    assert os.path.exists(os.path.join(root, "gt_mesh_00.obj"))
    assert os.path.exists(os.path.join(root, "gt_light_00.npy"))
    view = ds.identities[0].views[0]
    assert view.mask.any()
    # decomposition additivity survives the float32 PFM round trip
    total = view.gt["diffuse"] + view.gt["specular"] + view.gt["sss"]
    assert np.max(np.abs(view.image - total)) < 1e-6
    # GT mesh vertices lie on the analytic zero level set
    scene = AnalyticScene(spec)
    spacing = 2.0 / (48 - 1)
    assert np.max(np.abs(scene.sdf(meshes[0].vertices))) < 2 * spacing
