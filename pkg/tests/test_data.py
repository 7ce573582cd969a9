"""Dataset IO, ray-pool rebalancing, and the synthetic ground-truth factory."""

import json
import shutil

import numpy as np
import pytest

from objcap import data as dt
from objcap import synthetic as sy
from objcap.cameras import Camera, look_at
from objcap.shading import eval_sh, load_sh_text


def tiny_dataset(tmp_path, n=3, size=16):
    """Hand-built scene: gray square centered in each view."""
    names, images, masks, cams = [], [], [], []
    for k in range(n):
        img = np.full((size, size, 3), 0.5)
        mask = np.zeros((size, size), dtype=bool)
        mask[4:12, 4:12] = True
        pos = np.array([2.0 * np.cos(k), 2.0 * np.sin(k), 1.0])
        cams.append(Camera(rotation=look_at(pos, np.zeros(3)), translation=pos,
                           focal=20.0, principal=np.array([size / 2, size / 2]),
                           width=size, height=size, near=0.5, far=4.0))
        names.append(f"v{k}")
        images.append(img)
        masks.append(mask)
    ds = dt.SceneDataset(root=tmp_path, names=names, images=images,
                         masks=masks, cameras=cams,
                         train_idx=list(range(n)), test_idx=[])
    dt.save_dataset(ds, tmp_path)
    return ds


# ----------------------------------------------------------------- loading


def test_roundtrip_masks_and_cameras(tmp_path):
    ds = tiny_dataset(tmp_path)
    back = dt.load_dataset(tmp_path)
    assert back.names == ds.names
    for m0, m1 in zip(ds.masks, back.masks):
        np.testing.assert_array_equal(m0, m1)
    for c0, c1 in zip(ds.cameras, back.cameras):
        np.testing.assert_array_equal(c0.rotation, c1.rotation)
        np.testing.assert_array_equal(c0.translation, c1.translation)
        assert c0.focal == c1.focal
        assert (c0.near, c1.far) == (c1.near, c1.far)


def test_background_is_white_after_load(tmp_path):
    tiny_dataset(tmp_path)
    ds = dt.load_dataset(tmp_path)
    img, mask = ds.images[0], ds.masks[0]
    np.testing.assert_allclose(img[~mask], 1.0)
    np.testing.assert_allclose(img[mask], 0.5, atol=1 / 255)


def test_missing_mask_is_named(tmp_path):
    tiny_dataset(tmp_path)
    (tmp_path / "masks" / "v1.png").unlink()
    with pytest.raises(dt.DatasetError, match="v1.png"):
        dt.load_dataset(tmp_path)


def test_size_mismatch_is_named(tmp_path):
    tiny_dataset(tmp_path)
    dt.save_mask(tmp_path / "masks" / "v2.png", np.zeros((8, 8), dtype=bool))
    with pytest.raises(dt.DatasetError, match="v2.png"):
        dt.load_dataset(tmp_path)


def test_missing_cameras_file(tmp_path):
    with pytest.raises(dt.DatasetError, match="cameras.json"):
        dt.load_dataset(tmp_path)


def test_all_background_mask_accepted(tmp_path):
    tiny_dataset(tmp_path)
    dt.save_mask(tmp_path / "masks" / "v0.png",
                 np.zeros((16, 16), dtype=bool))
    ds = dt.load_dataset(tmp_path)
    assert not ds.masks[0].any()
    np.testing.assert_allclose(ds.images[0], 1.0)


def test_split_respected(tmp_path):
    tiny_dataset(tmp_path)
    with open(tmp_path / "split.json", "w") as f:
        json.dump({"train": ["v0", "v2"], "test": ["v1"]}, f)
    ds = dt.load_dataset(tmp_path)
    assert ds.train_idx == [0, 2]
    assert ds.test_idx == [1]


def test_split_unknown_name_rejected(tmp_path):
    tiny_dataset(tmp_path)
    with open(tmp_path / "split.json", "w") as f:
        json.dump({"train": ["nope"]}, f)
    with pytest.raises(dt.DatasetError):
        dt.load_dataset(tmp_path)


def test_mask_dilation_grows_mask(tmp_path):
    tiny_dataset(tmp_path)
    plain = dt.load_dataset(tmp_path)
    fat = dt.load_dataset(tmp_path, mask_dilate=2)
    assert fat.masks[0].sum() > plain.masks[0].sum()
    assert (fat.masks[0] & plain.masks[0]).sum() == plain.masks[0].sum()
    # radius 2 disk: one-past-corner pixel gets covered, far pixels do not
    assert fat.masks[0][3, 4] and not fat.masks[0][0, 0]


def test_points_loaded(tmp_path):
    tiny_dataset(tmp_path)
    pts = np.arange(12, dtype=np.float64).reshape(4, 3)
    np.savetxt(tmp_path / "points.txt", pts)
    ds = dt.load_dataset(tmp_path)
    np.testing.assert_allclose(ds.points, pts)
    lo, hi = ds.bbox(pad=0.0)
    np.testing.assert_allclose(lo, pts.min(0))
    np.testing.assert_allclose(hi, pts.max(0))


# ----------------------------------------------------------------- ray pool


def test_pool_counts(tmp_path):
    ds = tiny_dataset(tmp_path)
    pool = dt.RayPool(ds)
    assert len(pool) == 3 * 16 * 16
    assert pool.n_foreground == 3 * 64


def test_rebalance_factor_two_exact():
    pool = dt.RayPool.__new__(dt.RayPool)
    pool.fg = np.zeros(1000, dtype=bool)
    pool.fg[:100] = True
    order = dt.RayPool.rebalance(pool, seed=0)
    fg_kept = pool.fg[order].sum()
    assert fg_kept == 100
    assert len(order) - fg_kept == 200


def test_rebalance_under_limit_keeps_all():
    pool = dt.RayPool.__new__(dt.RayPool)
    pool.fg = np.zeros(250, dtype=bool)
    pool.fg[:100] = True
    order = dt.RayPool.rebalance(pool, seed=0)
    assert len(order) == 250


def test_rebalance_deterministic_and_seed_sensitive():
    pool = dt.RayPool.__new__(dt.RayPool)
    pool.fg = np.zeros(5000, dtype=bool)
    pool.fg[::7] = True
    a = dt.RayPool.rebalance(pool, seed=3)
    b = dt.RayPool.rebalance(pool, seed=3)
    c = dt.RayPool.rebalance(pool, seed=4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_rebalance_never_drops_foreground():
    pool = dt.RayPool.__new__(dt.RayPool)
    pool.fg = np.zeros(4000, dtype=bool)
    pool.fg[100:250] = True
    for seed in range(5):
        order = dt.RayPool.rebalance(pool, seed=seed)
        assert pool.fg[order].sum() == 150


def test_rebalance_disabled_keeps_everything():
    pool = dt.RayPool.__new__(dt.RayPool)
    pool.fg = np.zeros(1000, dtype=bool)
    pool.fg[:10] = True
    order = dt.RayPool.rebalance(pool, seed=0, adaptive=False)
    assert len(order) == 1000


def test_zero_foreground_rejected(tmp_path):
    tiny_dataset(tmp_path)
    for k in range(3):
        dt.save_mask(tmp_path / "masks" / f"v{k}.png",
                     np.zeros((16, 16), dtype=bool))
    ds = dt.load_dataset(tmp_path)
    with pytest.raises(dt.DatasetError, match="foreground"):
        dt.RayPool(ds)


# ---------------------------------------------------------------- synthetic


@pytest.fixture(scope="module")
def sphere_scene(tmp_path_factory):
    out = tmp_path_factory.mktemp("sphere")
    spec = sy.preset("sphere")
    spec.image_size = 24
    spec.mc_samples = 512
    scene = sy.make_synthetic(spec, seed=11, out_dir=out)
    return scene, out


def test_sphere_images_are_red_disks(sphere_scene):
    scene, out = sphere_scene
    ds = dt.load_dataset(out)
    for img, mask in zip(ds.images, ds.masks):
        frac = mask.mean()
        assert 0.05 < frac < 0.6
        fg = img[mask]
        assert fg[:, 0].mean() > 0.9       # strong red, encoded
        assert fg[:, 1:].max() < 0.1       # no green/blue
        np.testing.assert_allclose(img[~mask], 1.0)


def test_sphere_center_pixel_lambert_value(sphere_scene):
    # constant unit environment: diffuse radiance equals k_d exactly,
    # so the center pixel is ~(1, 0, 0) linear up to Monte-Carlo noise
    scene, _ = sphere_scene
    _, mask, _, linear = scene.render_view(0)
    c = scene.spec.image_size // 2
    patch = linear[c - 1:c + 1, c - 1:c + 1]
    assert mask[c, c]
    assert np.allclose(patch[..., 0], 1.0, atol=0.04)
    assert np.allclose(patch[..., 1:], 0.0, atol=1e-12)


def test_normal_sidecar_matches_geometry(sphere_scene):
    scene, out = sphere_scene
    nm = np.load(out / "gt" / "normal_view_000.npy")
    _, mask, want, _ = scene.render_view(0)
    np.testing.assert_allclose(nm, want.astype(np.float32), atol=1e-6)
    lengths = np.linalg.norm(nm[mask], axis=-1)
    np.testing.assert_allclose(lengths, 1.0, atol=1e-5)
    assert not nm[~mask].any()


def test_light_sidecar_constant_white(sphere_scene):
    scene, out = sphere_scene
    c = load_sh_text(out / "gt" / "light_view_000.txt")
    dirs = sy._fibonacci_dirs(32)
    np.testing.assert_allclose(eval_sh(c, dirs), 1.0, atol=1e-12)


def test_bitwise_reproducible(tmp_path):
    spec = sy.preset("toy")
    spec.mc_samples = 128
    sy.make_synthetic(spec, seed=5, out_dir=tmp_path / "a")
    sy.make_synthetic(spec, seed=5, out_dir=tmp_path / "b")
    for rel in ["images/view_000.png", "masks/view_002.png", "cameras.json",
                "points.txt", "gt/normal_view_001.npy", "gt/light_view_000.txt"]:
        a = (tmp_path / "a" / rel).read_bytes()
        b = (tmp_path / "b" / rel).read_bytes()
        assert a == b, rel


def test_seed_changes_views_not_geometry(tmp_path):
    spec = sy.preset("toy")
    s1 = sy.SyntheticScene(spec, seed=1)
    s2 = sy.SyntheticScene(spec, seed=2)
    assert not np.allclose(s1.cameras[0].translation, s2.cameras[0].translation)
    pts = np.random.default_rng(0).uniform(-1, 1, (500, 3))
    np.testing.assert_array_equal(s1.density(pts), s2.density(pts))


def test_random_light_mode_per_image(tmp_path):
    spec = sy.preset("duo")
    spec.n_views = 3
    spec.image_size = 12
    spec.mc_samples = 64
    spec.n_test = 1
    sy.make_synthetic(spec, seed=9, out_dir=tmp_path)
    c0 = load_sh_text(tmp_path / "gt" / "light_view_000.txt")
    c1 = load_sh_text(tmp_path / "gt" / "light_view_001.txt")
    assert c0.shape == (16, 3)
    assert not np.allclose(c0, c1)
    # positivity floor held on the probe directions
    rad = eval_sh(c0, sy._fibonacci_dirs(256))
    assert rad.min() > 0.0


def test_split_written_by_synth(sphere_scene):
    _, out = sphere_scene
    ds = dt.load_dataset(out)
    assert len(ds.train_idx) == 7
    assert len(ds.test_idx) == 1


def test_density_inside_outside():
    scene = sy.SyntheticScene(sy.preset("sphere"), seed=0)
    sigma = scene.density(np.array([[0.0, 0.0, 0.0], [0.3, 0.2, 0.1],
                                    [0.6, 0.0, 0.0], [2.0, 2.0, 2.0]]))
    np.testing.assert_allclose(sigma, [60.0, 60.0, 0.0, 0.0])


def test_box_hit_and_normal():
    prim = sy.Primitive("box", (0.0, 0.0, 0.0), (0.5, 0.5, 0.5), (1, 1, 1))
    o = np.array([[2.0, 0.1, 0.2], [0.1, -3.0, 0.0], [2.0, 2.0, 2.0]])
    d = np.array([[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
    t = prim.hit(o, d)
    np.testing.assert_allclose(t[:2], [1.5, 2.5])
    assert np.isinf(t[2])
    pts = o[:2] + t[:2, None] * d[:2]
    n = prim.normal(pts)
    np.testing.assert_allclose(n, [[1, 0, 0], [0, -1, 0]], atol=1e-12)


def test_sphere_hit_depth():
    prim = sy.Primitive("sphere", (0.0, 0.0, 0.0), 0.5, (1, 0, 0))
    o = np.array([[0.0, 0.0, 3.0]])
    d = np.array([[0.0, 0.0, -1.0]])
    np.testing.assert_allclose(prim.hit(o, d), [2.5])


def test_first_hit_picks_nearest():
    spec = sy.preset("duo")
    scene = sy.SyntheticScene(spec, seed=0)
    # ray along -x passes the box (x ~ 0.6 face) before the sphere
    o = np.array([[3.0, 0.1, -0.1]])
    d = np.array([[-1.0, 0.0, 0.0]])
    t, idx = scene.first_hit(o, d)
    assert idx[0] == 1
    assert np.isclose(t[0], 3.0 - 0.6)


def test_surface_points_on_surfaces():
    scene = sy.SyntheticScene(sy.preset("sphere"), seed=3)
    pts = scene.surface_points()
    r = np.linalg.norm(pts, axis=-1)
    np.testing.assert_allclose(r, 0.5, atol=1e-9)
