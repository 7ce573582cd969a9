"""Two-stage optimization: density-field fitting with camera refinement,
surface-normal grid extraction, and material/lighting fitting.

Stage 1 learns static density + view-dependent color jointly with a
transient branch, per-image embeddings, and camera pose/focal deltas.
Stage 2 freezes the density trunk and the refined cameras, then fits the
material branch, per-image lighting coefficients, tone-mapping gammas, and
a fresh transient layer; geometry quantities (weights, expected depth) are
computed outside the graph since nothing upstream of them trains.

Shading in stage 2 collapses to the expected-depth point on rays whose
depth variance is below (t_far - t_near) / 5000; wider rays shade every
sample and composite. Normal smoothness is regularized at the expected
points only (the collapsed path is the common case; wide rays are rare and
already averaged over samples).
"""

from dataclasses import dataclass, asdict
from pathlib import Path
import copy
import json
import time

import numpy as np

from . import autodiff as ad
from . import losses as ls
from . import volume
from .cameras import Camera, CameraDelta, apply_delta, rays_with_delta
from .checkpoint import load_container, save_container
from .data import RayPool, SceneDataset, load_dataset
from .fields import FieldConfig, GeometryField, RenderField
from .losses import LossWeights
from .normals import NormalGrid, build_grid, cubic_bbox_from_points
from .optim import GradientError, ParamStore, adam_step, clip_global_norm, lr_schedule
from .shading import blend_transient, shade_point, tone_map, tone_map_np

TAU_D_DIVISOR = 5000.0


class NumericsError(RuntimeError):
    """Training diverged or a model query produced nothing usable."""


_FIELD_PREFIXES = ("trunk", "sigma_head", "color_head", "transient", "embed",
                   "material", "mat_", "light", "gamma")


@dataclass
class TrainConfig:
    batch_size: int = 4096
    n_samples: int = 32            # ray points per segment
    epochs_geometry: int = 30
    epochs_rendering: int = 10
    seed: int = 0
    lr: float = 4e-4
    camera_lr: float | None = None  # None: same as lr
    clip_norm: float = 10.0
    checkpoint_every: int = 10     # epochs
    use_transient: bool = True
    use_silhouette: bool = True
    use_adaptive: bool = True
    use_camera_opt: bool = True
    use_normal_loss: bool = True
    smooth_std: float = 0.01       # scene units, stage-2 jitter
    light_reg_samples: int = 0     # 0: one direction per batch ray
    log_every: int = 10            # steps between log lines
    threads: int = 1

    def __post_init__(self):
        if self.batch_size < 1 or self.n_samples < 2:
            raise ValueError("batch_size >= 1 and n_samples >= 2 required")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    @classmethod
    def desk(cls, **over) -> "TrainConfig":
        """Laptop-scale preset. The paper-scale rate (4e-4 over ~1e5 steps)
        cannot move the density preactivation far enough in a few hundred
        steps, so the field rate is raised; smaller batches buy more
        optimizer steps per epoch at the same cost.  Camera deltas keep a
        far gentler rate: pose space is measured in radians, and anything
        faster lets exactly-posed cameras random-walk away from truth."""
        return cls(**{"batch_size": 512, "lr": 5e-3, "camera_lr": 1e-4,
                      **over})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def refined_cameras(cameras, arrays) -> list:
    """Apply stored per-image deltas; pass-through when none were trained."""
    if "cam/rot" not in arrays:
        return list(cameras)
    out = []
    for i, cam in enumerate(cameras):
        delta = CameraDelta(rot=arrays["cam/rot"][i],
                           trans=arrays["cam/trans"][i],
                           focal=arrays["cam/focal"][i].item())
        out.append(apply_delta(cam, delta))
    return out


def _plain_rays(cameras, img_idx, px):
    """Non-differentiable rays grouped by image."""
    origins = np.empty((len(img_idx), 3))
    dirs = np.empty((len(img_idx), 3))
    for i in np.unique(img_idx):
        sel = img_idx == i
        o, d = cameras[i].pixel_rays(px[sel])
        origins[sel] = o
        dirs[sel] = d
    return origins, dirs


class _JsonlLog:
    def __init__(self, path):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, record: dict):
        if self.path:
            with open(self.path, "a") as f:
                f.write(json.dumps(record) + "\n")


# ---------------------------------------------------------------------------
# stage 1


class GeometryTrainer:
    def __init__(self, dataset: SceneDataset, config: TrainConfig,
                 field_config: FieldConfig | None = None,
                 weights: LossWeights | None = None):
        self.dataset = dataset
        self.config = config
        self.field_config = field_config or FieldConfig.desk()
        self.weights = weights or LossWeights()
        master = np.random.default_rng(config.seed)
        init_rng = np.random.default_rng(master.integers(2**63))
        self.store = ParamStore()
        self.field = GeometryField(self.store, self.field_config,
                                   n_images=len(dataset), rng=init_rng)
        if config.use_camera_opt:
            n = len(dataset)
            self.store.add("cam/rot", np.zeros((n, 3)))
            self.store.add("cam/trans", np.zeros((n, 3)))
            self.store.add("cam/focal", np.zeros((n, 1)))
        self.pool = RayPool(dataset)
        self.bbox = dataset.bbox()
        self._rng = np.random.default_rng(master.integers(2**63))
        self._epoch_seed = int(master.integers(2**31))
        self._cam_ratio = (config.camera_lr if config.camera_lr is not None
                           else config.lr) / config.lr
        self.near = np.array([c.near for c in dataset.cameras])
        self.far = np.array([c.far for c in dataset.cameras])
        self.epoch = 0

    # -------------------------------------------------------------- rays

    def _rays(self, img_idx, px):
        if self.config.use_camera_opt:
            return rays_with_delta(self.dataset.cameras, img_idx, px,
                                   self.store["cam/rot"],
                                   self.store["cam/trans"],
                                   self.store["cam/focal"])
        o, d = _plain_rays(self.dataset.cameras, img_idx, px)
        return ad.constant(o), ad.constant(d)

    def refined_cameras(self) -> list:
        return refined_cameras(self.dataset.cameras, self.store.arrays())

    # -------------------------------------------------------------- step

    def step(self, idx: np.ndarray, lr: float) -> dict:
        cfg = self.config
        img = self.pool.img_idx[idx]
        px = np.stack([self.pool.px[idx], self.pool.py[idx]], axis=-1)
        target = self.pool.rgb[idx]
        fg = self.pool.fg[idx].astype(np.float64)
        b = len(idx)

        o_dv, d_dv = self._rays(img, px)
        o_np, d_np = o_dv.value, d_dv.value
        near, far = self.near[img], self.far[img]
        if self.bbox is not None:
            lo, hi = self.bbox
            t0, t1, hit = volume.ray_box_range(o_np, d_np, lo, hi, near, far)
        else:
            t0, t1, hit = near, far, np.ones(b, dtype=bool)

        h_ids = np.nonzero(hit)[0]
        m_ids = np.nonzero(~hit)[0]
        floor = self.field_config.beta_floor
        beta_miss = floor if cfg.use_transient else 1.0
        # rays that never enter the volume composite to pure white; their
        # color and silhouette terms are constants folded into the means
        miss_color = 0.0
        if len(m_ids):
            sq = ((1.0 - target[m_ids]) ** 2).sum(-1)
            miss_color = float(np.sum(sq / (2.0 * beta_miss**2)
                                      + np.log(beta_miss**2) / 2.0))

        if len(h_ids) == 0:
            return None     # nothing differentiable in this batch

        n_p = cfg.n_samples
        depths = volume.sample_stratified(self._rng, t0[h_ids], t1[h_ids],
                                          n_p, jitter=True)
        bh = len(h_ids)
        o_h = ad.take_rows(o_dv, h_ids)
        d_h = ad.take_rows(d_dv, h_ids)
        pts = ad.reshape(o_h, (bh, 1, 3)) \
            + ad.reshape(d_h, (bh, 1, 3)) * ad.constant(depths[..., None])
        flat = ad.reshape(pts, (bh * n_p, 3))
        view = ad.take_rows(d_dv, np.repeat(h_ids, n_p))
        img_pt = np.repeat(img[h_ids], n_p)

        feat = self.field.trunk_features(flat)
        sigma_s = ad.reshape(self.field.static_density(feat), (bh, n_p))
        color_s = ad.reshape(self.field.static_color(feat, view, img_pt),
                             (bh, n_p, 3))
        deltas = volume.segment_lengths(depths, t0[h_ids])

        if cfg.use_transient:
            sg_t, c_t, beta = self.field.transient(feat, img_pt)
            comp = volume.composite_joint(
                deltas, sigma_s, color_s,
                ad.reshape(sg_t, (bh, n_p)), ad.reshape(c_t, (bh, n_p, 3)),
                beta, beta_floor=floor)
            beta_ray = ad.reshape(comp["beta"], (bh,))
            l_tr = ls.transient_mean(sg_t)
        else:
            comp = volume.composite_static(deltas, sigma_s, color_s)
            beta_ray = ad.constant(np.ones(bh))
            l_tr = ad.constant(0.0)

        l_color = ls.color_nll(comp["rgb"], target[h_ids], beta_ray,
                               beta_min=min(floor, 1.0))
        l_color = l_color * (bh / b) + miss_color / b

        if cfg.use_silhouette:
            alpha = ad.reshape(ad.scatter_rows(b, h_ids, comp["opacity"]), (b,))
            l_sil = ls.silhouette_bce(alpha, fg)
        else:
            l_sil = ad.constant(0.0)

        if cfg.use_camera_opt:
            l_cam = ls.camera_l2(
                self.store["cam/rot"], self.store["cam/trans"],
                ad.reshape(self.store["cam/focal"], (len(self.dataset),)))
        else:
            l_cam = ad.constant(0.0)

        total = ls.total_geometry(l_color, l_tr, l_sil, l_cam, self.weights)
        if not np.isfinite(total.value):
            raise NumericsError(f"stage-1 loss became {total.value}")
        ad.backward(total)
        clip_global_norm(self.store, cfg.clip_norm)
        adam_step(self.store, lr, only_prefixes=_FIELD_PREFIXES)
        if cfg.use_camera_opt:
            adam_step(self.store, lr * self._cam_ratio, only_prefixes=("cam/",))
        self.store.zero_grads()
        mse = float(((comp["rgb"].value - target[h_ids]) ** 2).sum())
        if len(m_ids):
            mse += float(((1.0 - target[m_ids]) ** 2).sum())
        return {"loss": float(total.value), "color": float(l_color.value),
                "transient": float(l_tr.value), "silhouette": float(l_sil.value),
                "camera": float(l_cam.value), "mse": mse / (3 * b)}

    # ------------------------------------------------------------- train

    def train(self, out_dir, ckpt_name: str = "geometry.ckpt",
              log_name: str = "stage1.jsonl") -> Path:
        cfg = self.config
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ckpt_path = out / ckpt_name
        log = _JsonlLog(out / log_name)
        self.save(ckpt_path)        # last-good anchor for the abort path
        step = 0
        t_start = time.time()
        for epoch in range(cfg.epochs_geometry):
            self.epoch = epoch
            lr = lr_schedule("geometry", epoch, base=cfg.lr)
            order = self.pool.rebalance(self._epoch_seed + epoch,
                                        adaptive=cfg.use_adaptive)
            for s in range(0, len(order), cfg.batch_size):
                try:
                    rec = self.step(order[s:s + cfg.batch_size], lr)
                except (GradientError, NumericsError) as e:
                    raise NumericsError(
                        f"stage 1 diverged in epoch {epoch}: {e}; last saved "
                        f"checkpoint kept at {ckpt_path}") from e
                if rec is not None and step % cfg.log_every == 0:
                    rec.update(stage=1, epoch=epoch, step=step, lr=lr,
                               elapsed=round(time.time() - t_start, 3))
                    log.write(rec)
                step += 1
            if (epoch + 1) % cfg.checkpoint_every == 0 \
                    or epoch == cfg.epochs_geometry - 1:
                self.save(ckpt_path)
        return ckpt_path

    def save(self, path) -> None:
        meta = {
            "stage": 1,
            "epoch": self.epoch,
            "n_images": len(self.dataset),
            "names": self.dataset.names,
            "data": str(self.dataset.root),
            "field": self.field_config.to_dict(),
            "train": self.config.to_dict(),
        }
        save_container(path, "geometry", self.store.arrays(), meta)


def load_geometry(ckpt_path):
    """Rebuild the stage-1 field from a checkpoint.

    Returns (field, store, arrays, meta); camera deltas stay in `arrays`.
    """
    arrays, meta, _ = load_container(ckpt_path, expect_kind="geometry")
    fc = FieldConfig.from_dict(meta["field"])
    store = ParamStore()
    field = GeometryField(store, fc, meta["n_images"], init=False)
    for k, v in arrays.items():
        store.add(k, v)
    return field, store, arrays, meta


def render_geometry_image(field: GeometryField, store: ParamStore,
                          camera: Camera, embed_index: int,
                          n_samples: int = 32, bbox=None, chunk: int = 4096,
                          threads: int = 1) -> dict:
    """Novel view through the stage-1 model.

    The view-dependent color head needs an appearance embedding; for a
    held-out camera, borrow the one of `embed_index` (lighting transfer).
    Static field only, midpoint depths: deterministic, directly comparable
    to the stored images.

    Returns {"rgb", "alpha"} as (H, W, ...) arrays.
    """
    f = copy.copy(field)
    f.store = _ConstStore(store)
    h_img, w_img = camera.height, camera.width
    ys, xs = np.mgrid[0:h_img, 0:w_img]
    px_all = np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=-1)
    n_rays = len(px_all)
    rgb = np.ones((n_rays, 3))
    alpha = np.zeros(n_rays)

    def run(lo: int, hi: int):
        px = px_all[lo:hi]
        o, d = camera.pixel_rays(px)
        near = np.full(len(px), camera.near)
        far = np.full(len(px), camera.far)
        if bbox is not None:
            t0, t1, hit = volume.ray_box_range(o, d, bbox[0], bbox[1],
                                               near, far)
        else:
            t0, t1, hit = near, far, np.ones(len(px), dtype=bool)
        h = np.nonzero(hit)[0]
        if len(h) == 0:
            return
        depths = volume.sample_stratified(None, t0[h], t1[h], n_samples,
                                          jitter=False)
        flat = ad.constant((o[h, None, :] + d[h, None, :]
                            * depths[..., None]).reshape(-1, 3))
        view = ad.constant(np.repeat(d[h], n_samples, axis=0))
        feat = f.trunk_features(flat)
        sigma = ad.reshape(f.static_density(feat), (len(h), n_samples))
        color = ad.reshape(
            f.static_color(feat, view,
                           np.full(len(h) * n_samples, embed_index)),
            (len(h), n_samples, 3))
        deltas = volume.segment_lengths(depths, t0[h])
        comp = volume.composite_static(deltas, sigma, color)
        rgb[lo + h] = comp["rgb"].value
        alpha[lo + h] = comp["opacity"].value[:, 0]

    spans = [(s, min(s + chunk, n_rays)) for s in range(0, n_rays, chunk)]
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda sp: run(*sp), spans))
    else:
        for sp in spans:
            run(*sp)
    return {"rgb": rgb.reshape(h_img, w_img, 3),
            "alpha": alpha.reshape(h_img, w_img)}


# ---------------------------------------------------------------------------
# normal-grid extraction


def surface_cloud(density_fn, cameras, masks, image_indices,
                  near, far, bbox=None, pixels_per_image: int = 2048,
                  n_samples: int = 64, seed: int = 0,
                  opacity_min: float = 0.5) -> np.ndarray:
    """Expected ray-surface intersections over sampled object pixels.

    Deterministic for fixed inputs: pixel choice is seeded and depths are
    stratified midpoints. Rays whose opacity stays below `opacity_min` are
    discarded (they see through the model).
    """
    rng = np.random.default_rng(seed)
    points = []
    for i in image_indices:
        mask = masks[i]
        ys, xs = np.nonzero(mask)
        if len(ys) == 0:
            continue
        if len(ys) > pixels_per_image:
            pick = rng.choice(len(ys), size=pixels_per_image, replace=False)
            pick.sort()
            ys, xs = ys[pick], xs[pick]
        px = np.stack([xs + 0.5, ys + 0.5], axis=-1).astype(np.float64)
        o, d = cameras[i].pixel_rays(px)
        t_n = np.full(len(px), near[i] if np.ndim(near) else near)
        t_f = np.full(len(px), far[i] if np.ndim(far) else far)
        if bbox is not None:
            t_n, t_f, hit = volume.ray_box_range(o, d, bbox[0], bbox[1], t_n, t_f)
            o, d, t_n, t_f = o[hit], d[hit], t_n[hit], t_f[hit]
            if len(o) == 0:
                continue
        depths = volume.sample_stratified(None, t_n, t_f, n_samples, jitter=False)
        flat = (o[:, None, :] + d[:, None, :] * depths[..., None]).reshape(-1, 3)
        sigma = density_fn(flat).reshape(len(o), n_samples)
        deltas = volume.segment_lengths(depths, t_n)
        e_d, _, fgflag = volume.depth_stats(deltas, sigma, depths)
        opacity = 1.0 - np.exp(-(deltas * sigma).sum(-1))
        keep = fgflag & (opacity >= opacity_min)
        if keep.any():
            points.append(o[keep] + e_d[keep, None] * d[keep])
    if not points:
        raise NumericsError("surface cloud is empty: the density field has "
                            "no opaque foreground")
    return np.concatenate(points, axis=0)


def extract_normals(ckpt_path, out_path, lam: float = 1.0,
                    resolution: int = 128, data_dir=None,
                    pixels_per_image: int = 2048, seed: int = 0,
                    pad: float = 0.05, hard_clamp: bool = False,
                    chunk: int = 65536) -> NormalGrid:
    """Stage-1 checkpoint -> confidence-weighted normal grid on disk."""
    field, _, arrays, meta = load_geometry(ckpt_path)
    dataset = load_dataset(data_dir or meta["data"])
    cams = refined_cameras(dataset.cameras, arrays)
    near = np.array([c.near for c in cams])
    far = np.array([c.far for c in cams])
    cloud = surface_cloud(field.density_np, cams, dataset.masks,
                          dataset.train_idx, near, far,
                          bbox=dataset.bbox(), pixels_per_image=pixels_per_image,
                          seed=seed)
    lo, hi = cubic_bbox_from_points(cloud, pad=pad)
    grid = build_grid(field.density_np, lo, hi, resolution, lam,
                      chunk=chunk, hard_clamp=hard_clamp)
    grid.save(out_path)
    return grid


# ---------------------------------------------------------------------------
# stage 2


class RenderingTrainer:
    def __init__(self, dataset: SceneDataset, geometry_ckpt, grid,
                 config: TrainConfig, weights: LossWeights | None = None):
        self.dataset = dataset
        self.config = config
        self.weights = weights or LossWeights()
        arrays, meta, _ = load_container(geometry_ckpt, expect_kind="geometry")
        self.field_config = FieldConfig.from_dict(meta["field"])
        fc = self.field_config
        frozen_keys = [f"trunk/l{i}/{p}" for i in range(fc.trunk_depth)
                       for p in "wb"] + ["sigma_head/w", "sigma_head/b"]
        self.frozen = {k: arrays[k] for k in frozen_keys}
        self.cam_deltas = {k: arrays[k] for k in
                           ("cam/rot", "cam/trans", "cam/focal") if k in arrays}

        master = np.random.default_rng(config.seed)
        init_rng = np.random.default_rng(master.integers(2**63))
        self.store = ParamStore()
        self.field = RenderField(self.store, fc, n_images=len(dataset),
                                 frozen=self.frozen, rng=init_rng)
        # continue the transient layer from where stage 1 left it
        warm = {k: v for k, v in arrays.items()
                if (k.startswith("transient") or k == "embed/transient")
                and k in self.store}
        self.store.load_arrays(warm)

        self.cameras = refined_cameras(dataset.cameras, arrays)
        self.grid_path = str(grid) if isinstance(grid, (str, Path)) else ""
        self.grid = NormalGrid.load(grid) if isinstance(grid, (str, Path)) \
            else grid
        self.pool = RayPool(dataset)
        if self.grid is not None:
            self.bbox = (self.grid.box_min, self.grid.box_max)
        else:
            self.bbox = dataset.bbox()
        self._rng = np.random.default_rng(master.integers(2**63))
        self._epoch_seed = int(master.integers(2**31))
        self.near = np.array([c.near for c in self.cameras])
        self.far = np.array([c.far for c in self.cameras])
        self.epoch = 0

    # ----------------------------------------------------------- geometry

    def _ray_geometry(self, img, px, jitter):
        """Frozen-density pass, all plain arrays.

        Returns per-ray dict: clipped ranges, depths, compositing weights,
        opacity, expected depth, variance gate.
        """
        o, d = _plain_rays(self.cameras, img, px)
        near, far = self.near[img], self.far[img]
        if self.bbox is not None:
            t0, t1, hit = volume.ray_box_range(o, d, self.bbox[0], self.bbox[1],
                                               near, far)
        else:
            t0, t1, hit = near, far, np.ones(len(img), dtype=bool)
        n_p = self.config.n_samples
        g = {"o": o, "d": d, "t0": t0, "t1": t1, "hit": hit}
        h = np.nonzero(hit)[0]
        if len(h) == 0:
            g.update(h_ids=h)
            return g
        rng = self._rng if jitter else None
        depths = volume.sample_stratified(rng, t0[h], t1[h], n_p, jitter=jitter)
        flat = (o[h, None, :] + d[h, None, :] * depths[..., None]).reshape(-1, 3)
        sigma = self.field.density_np(flat).reshape(len(h), n_p)
        deltas = volume.segment_lengths(depths, t0[h])
        tau = deltas * sigma
        trans = np.exp(-np.concatenate([np.zeros((len(h), 1)),
                                        np.cumsum(tau, -1)[:, :-1]], axis=-1))
        w = trans * (1.0 - np.exp(-tau))
        opacity = 1.0 - np.exp(-tau.sum(-1))
        e_d, var, fgflag = volume.depth_stats(deltas, sigma, depths)
        tau_d = (t1[h] - t0[h]) / TAU_D_DIVISOR
        g.update(h_ids=h, depths=depths, weights=w, opacity=opacity,
                 e_d=e_d, var=var, fgflag=fgflag, tau_d=tau_d)
        return g

    def _shade(self, pts: np.ndarray, img_pt: np.ndarray, w_out: np.ndarray):
        """Material + lighting graph at given points.

        Returns (linear rgb, normals, k_s, transient sigma, transient beta)
        as graph nodes; transient entries are None when the branch is off.
        """
        x = ad.constant(pts)
        feat = self.field.trunk_features(x)
        normal, k_d, k_s, gloss = self.field.material(x, feat)
        light = ad.take_rows(self.store["light"], img_pt)
        c_lin = shade_point(light, normal, ad.constant(w_out), k_d, k_s, gloss)
        if self.config.use_transient:
            sg_t, c_t, beta_t = self.field.transient(feat, img_pt)
            c_lin = blend_transient(c_lin, c_t, sg_t)
            return c_lin, normal, k_s, sg_t, beta_t
        return c_lin, normal, k_s, None, None

    # -------------------------------------------------------------- step

    def step(self, idx: np.ndarray, lr: float) -> dict:
        cfg = self.config
        img = self.pool.img_idx[idx]
        px = np.stack([self.pool.px[idx], self.pool.py[idx]], axis=-1)
        target = self.pool.rgb[idx]
        b = len(idx)
        floor = self.field_config.beta_floor
        g = self._ray_geometry(img, px, jitter=True)
        h = g["h_ids"]
        if len(h) == 0:
            return None

        use_exp = g["fgflag"] & (g["var"] < g["tau_d"])
        e_set = h[use_exp]
        a_set = h[g["fgflag"] & ~use_exp]
        exp_rows = np.nonzero(use_exp)[0]
        all_rows = np.nonzero(g["fgflag"] & ~use_exp)[0]

        color_parts, beta_parts = [], []
        norm_dv, ks_dv, sgt_dv = [], [], []
        norm_pts = []
        l_sm = ad.constant(0.0)

        if len(e_set):
            pts = g["o"][e_set] + g["e_d"][exp_rows, None] * g["d"][e_set]
            alpha = g["opacity"][exp_rows][:, None]
            c_lin, normal, k_s, sg_t, beta_t = self._shade(
                pts, img[e_set], -g["d"][e_set])
            ray_lin = c_lin * ad.constant(alpha) + ad.constant(1.0 - alpha)
            gamma = ad.reshape(ad.take_rows(self.store["gamma"], img[e_set]),
                               (len(e_set), 1))
            color_parts.append((e_set, tone_map(ray_lin, gamma)))
            if sg_t is not None:
                bw = 1.0 - ad.exp(ad.neg(sg_t))
                beta_parts.append(
                    (e_set, ad.constant(alpha) * bw * beta_t + floor))
                sgt_dv.append(sg_t)
            norm_dv.append(normal)
            ks_dv.append(k_s)
            norm_pts.append(pts)
            if cfg.smooth_std > 0:
                jit = pts + self._rng.normal(0.0, cfg.smooth_std, pts.shape)
                _, normal_j, _, _, _ = self._shade(jit, img[e_set],
                                                   -g["d"][e_set])
                l_sm = ls.normal_smoothness(normal, normal_j)

        if len(a_set):
            n_p = cfg.n_samples
            depths = g["depths"][all_rows]
            w = g["weights"][all_rows]
            pts = (g["o"][a_set, None, :] + g["d"][a_set, None, :]
                   * depths[..., None]).reshape(-1, 3)
            w_out = np.repeat(-g["d"][a_set], n_p, axis=0)
            c_lin, normal, k_s, sg_t, beta_t = self._shade(
                pts, np.repeat(img[a_set], n_p), w_out)
            c3 = ad.reshape(c_lin, (len(a_set), n_p, 3))
            wc = ad.constant(w[..., None])
            bg = (1.0 - g["opacity"][all_rows])[:, None]
            ray_lin = ad.vsum(wc * c3, axis=1) + ad.constant(bg)
            gamma = ad.reshape(ad.take_rows(self.store["gamma"], img[a_set]),
                               (len(a_set), 1))
            color_parts.append((a_set, tone_map(ray_lin, gamma)))
            if sg_t is not None:
                bw2 = ad.reshape(1.0 - ad.exp(ad.neg(sg_t)), (len(a_set), n_p))
                b2 = ad.reshape(beta_t, (len(a_set), n_p))
                beta_parts.append(
                    (a_set, ad.vsum(ad.constant(w) * bw2 * b2, axis=-1,
                                    keepdims=True) + floor))
                sgt_dv.append(sg_t)
            norm_dv.append(normal)
            ks_dv.append(k_s)
            norm_pts.append(pts)

        if not color_parts:
            return None

        # background rows (missed box or transparent): encoded pure white
        shaded = np.zeros(b, dtype=bool)
        for rows, _ in color_parts:
            shaded[rows] = True
        base = np.where(~shaded[:, None], 1.0, 0.0)
        c_full = ad.constant(np.broadcast_to(base, (b, 3)).copy())
        for rows, dv in color_parts:
            c_full = c_full + ad.scatter_rows(b, rows, dv)
        if cfg.use_transient:
            beta_base = np.where(~shaded, floor, 0.0)
            beta_full = ad.constant(beta_base[:, None])
            for rows, dv in beta_parts:
                beta_full = beta_full + ad.scatter_rows(b, rows, dv)
            beta_full = ad.reshape(beta_full, (b,))
            beta_min = min(floor, 1.0)
        else:
            beta_full = ad.constant(np.ones(b))
            beta_min = 1.0
        l_color = ls.color_nll(c_full, target, beta_full, beta_min=beta_min)

        l_tr = ls.transient_mean(ad.concat([ad.reshape(s, (-1, 1))
                                            for s in sgt_dv], axis=0)) \
            if sgt_dv else ad.constant(0.0)

        if cfg.use_normal_loss and self.grid is not None:
            grid_n = np.concatenate([self.grid.sample(p) for p in norm_pts])
            pred_n = ad.concat(norm_dv, axis=0)
            l_n = ls.normal_supervision(pred_n, grid_n)
        else:
            l_n = ad.constant(0.0)

        uniq = np.unique(img)
        n_dirs = cfg.light_reg_samples or b
        dirs = self._rng.normal(size=(n_dirs, 3))
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
        l_reg = ls.regularity(ad.concat(ks_dv, axis=0),
                              ad.take_rows(self.store["gamma"], uniq),
                              ad.take_rows(self.store["light"], uniq),
                              dirs, self.weights)

        total = ls.total_rendering(l_color, l_tr, l_n, l_sm, l_reg, self.weights)
        if not np.isfinite(total.value):
            raise NumericsError(f"stage-2 loss became {total.value}")
        ad.backward(total)
        clip_global_norm(self.store, cfg.clip_norm)
        adam_step(self.store, lr, only_prefixes=_FIELD_PREFIXES)
        self.store.zero_grads()
        mse = float(((c_full.value - target) ** 2).mean())
        return {"loss": float(total.value), "color": float(l_color.value),
                "transient": float(l_tr.value), "normal": float(l_n.value),
                "smooth": float(l_sm.value), "reg": float(l_reg.value),
                "mse": mse}

    # ------------------------------------------------------------- train

    def train(self, out_dir, ckpt_name: str = "rendering.ckpt",
              log_name: str = "stage2.jsonl") -> Path:
        cfg = self.config
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ckpt_path = out / ckpt_name
        log = _JsonlLog(out / log_name)
        self.save(ckpt_path)        # last-good anchor for the abort path
        step = 0
        t_start = time.time()
        for epoch in range(cfg.epochs_rendering):
            self.epoch = epoch
            lr = lr_schedule("rendering", epoch, base=cfg.lr,
                             t_max=cfg.epochs_rendering)
            order = self.pool.rebalance(self._epoch_seed + epoch,
                                        adaptive=cfg.use_adaptive)
            for s in range(0, len(order), cfg.batch_size):
                try:
                    rec = self.step(order[s:s + cfg.batch_size], lr)
                except (GradientError, NumericsError) as e:
                    raise NumericsError(
                        f"stage 2 diverged in epoch {epoch}: {e}; last saved "
                        f"checkpoint kept at {ckpt_path}") from e
                if rec is not None and step % cfg.log_every == 0:
                    rec.update(stage=2, epoch=epoch, step=step, lr=lr,
                               elapsed=round(time.time() - t_start, 3))
                    log.write(rec)
                step += 1
            if (epoch + 1) % cfg.checkpoint_every == 0 \
                    or epoch == cfg.epochs_rendering - 1:
                self.save(ckpt_path)
        return ckpt_path

    def save(self, path) -> None:
        arrays = dict(self.store.arrays())
        for k, v in self.frozen.items():
            arrays["frozen/" + k] = v
        for k, v in self.cam_deltas.items():
            arrays[k] = v
        meta = {
            "stage": 2,
            "epoch": self.epoch,
            "n_images": len(self.dataset),
            "names": self.dataset.names,
            "data": str(self.dataset.root),
            "field": self.field_config.to_dict(),
            "train": self.config.to_dict(),
            "cameras": [c.to_dict() for c in self.cameras],
            "train_idx": [int(i) for i in self.dataset.train_idx],
            "grid": self.grid_path,
            "bbox": None if self.bbox is None else
            [np.asarray(self.bbox[0]).tolist(),
             np.asarray(self.bbox[1]).tolist()],
        }
        save_container(path, "rendering", arrays, meta)


# ---------------------------------------------------------------------------
# inference


class _ConstStore:
    """Read-only view of a ParamStore that hands out constants, so forward
    passes through it are constant-folded instead of taped."""

    def __init__(self, store: ParamStore):
        self._store = store

    def __getitem__(self, name: str) -> ad.DiffValue:
        return ad.constant(self._store[name].value)

    def __contains__(self, name: str) -> bool:
        return name in self._store


@dataclass
class RenderBundle:
    """A trained renderer restored from a stage-2 checkpoint: frozen
    density, material nets, refined cameras, per-image lights and gammas.
    The checkpoint is self-contained; the original dataset and grid files
    are not needed to render."""
    field: RenderField
    store: ParamStore
    cameras: list
    names: list
    meta: dict

    @classmethod
    def load(cls, path) -> "RenderBundle":
        arrays, meta, _ = load_container(path, expect_kind="rendering")
        fc = FieldConfig.from_dict(meta["field"])
        frozen = {k[len("frozen/"):]: v for k, v in arrays.items()
                  if k.startswith("frozen/")}
        store = ParamStore()
        field = RenderField(store, fc, meta["n_images"], frozen, init=False)
        for k, v in arrays.items():
            if k.startswith("frozen/") or k.startswith("cam/"):
                continue
            store.add(k, v)
        cameras = [Camera.from_dict(d) for d in meta["cameras"]]
        return cls(field=field, store=store, cameras=cameras,
                   names=list(meta["names"]), meta=meta)

    def frozen_field(self) -> RenderField:
        f = copy.copy(self.field)
        f.store = _ConstStore(self.store)
        return f

    def bbox(self):
        b = self.meta.get("bbox")
        if b is None:
            return None
        return np.array(b[0]), np.array(b[1])

    def light(self, i: int) -> np.ndarray:
        return self.store["light"].value[i].copy()

    def gamma(self, i: int) -> float:
        return float(self.store["gamma"].value[i])

    def nearest_train_index(self, camera: Camera) -> int:
        # held-out images carry untrained light rows, so only images that
        # actually trained are valid transfer sources
        cand = self.meta.get("train_idx") or range(len(self.cameras))
        d = {i: np.linalg.norm(self.cameras[i].translation - camera.translation)
             for i in cand}
        return min(d, key=d.get)


def _shade_frozen(field, pts, light_dv, w_out):
    """Material + shading graph at plain points; light_dv (1,16,3) or
    (B,16,3). With a constant-store field and constant light this folds to
    a constant."""
    x = ad.constant(pts)
    feat = field.trunk_features(x)
    normal, k_d, k_s, gloss = field.material(x, feat)
    c = shade_point(light_dv, normal, ad.constant(w_out), k_d, k_s, gloss)
    return c, normal, k_d, k_s, gloss


def render_image(field, camera: Camera, light: np.ndarray, gamma: float,
                 n_samples: int = 32, bbox=None, chunk: int = 4096,
                 tau_d: float | None = None, threads: int = 1) -> dict:
    """Render a full view through the frozen model under one SH light.

    Transients are off: this is the recovered object appearance. Depths are
    stratified midpoints, so the output is deterministic. tau_d overrides
    the per-ray variance gate: 0 shades every sample on every ray, inf
    collapses every foreground ray to its expected depth.

    Returns {"encoded", "linear", "alpha"} as (H, W, ...) arrays.
    """
    h_img, w_img = camera.height, camera.width
    ys, xs = np.mgrid[0:h_img, 0:w_img]
    px_all = np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=-1)
    n_rays = len(px_all)
    linear = np.ones((n_rays, 3))
    alpha = np.zeros(n_rays)
    light_dv = ad.constant(light[None, :, :])

    def run(lo: int, hi: int):
        px = px_all[lo:hi]
        o, d = camera.pixel_rays(px)
        near = np.full(len(px), camera.near)
        far = np.full(len(px), camera.far)
        if bbox is not None:
            t0, t1, hit = volume.ray_box_range(o, d, bbox[0], bbox[1],
                                               near, far)
        else:
            t0, t1, hit = near, far, np.ones(len(px), dtype=bool)
        h = np.nonzero(hit)[0]
        if len(h) == 0:
            return
        depths = volume.sample_stratified(None, t0[h], t1[h], n_samples,
                                          jitter=False)
        flat = (o[h, None, :] + d[h, None, :] * depths[..., None]).reshape(-1, 3)
        sigma = field.density_np(flat).reshape(len(h), n_samples)
        deltas = volume.segment_lengths(depths, t0[h])
        tau = deltas * sigma
        trans = np.exp(-np.concatenate([np.zeros((len(h), 1)),
                                        np.cumsum(tau, -1)[:, :-1]], axis=-1))
        w = trans * (1.0 - np.exp(-tau))
        opacity = 1.0 - np.exp(-tau.sum(-1))
        e_d, var, fgflag = volume.depth_stats(deltas, sigma, depths)
        gate = (t1[h] - t0[h]) / TAU_D_DIVISOR if tau_d is None else tau_d
        use_exp = fgflag & (var < gate)
        alpha[lo + h] = opacity

        e_rows = np.nonzero(use_exp)[0]
        a_rows = np.nonzero(fgflag & ~use_exp)[0]
        if len(e_rows):
            r = h[e_rows]
            pts = o[r] + e_d[e_rows, None] * d[r]
            c, *_ = _shade_frozen(field, pts, light_dv, -d[r])
            a = opacity[e_rows][:, None]
            linear[lo + r] = c.value * a + (1.0 - a)
        if len(a_rows):
            r = h[a_rows]
            pts = (o[r, None, :] + d[r, None, :]
                   * depths[a_rows][..., None]).reshape(-1, 3)
            c, *_ = _shade_frozen(field, pts, light_dv,
                                  np.repeat(-d[r], n_samples, axis=0))
            c3 = c.value.reshape(len(r), n_samples, 3)
            acc = (w[a_rows][..., None] * c3).sum(axis=1)
            linear[lo + r] = acc + (1.0 - opacity[a_rows])[:, None]

    spans = [(s, min(s + chunk, n_rays)) for s in range(0, n_rays, chunk)]
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda sp: run(*sp), spans))
    else:
        for sp in spans:
            run(*sp)
    encoded = tone_map_np(linear, gamma)
    return {"encoded": encoded.reshape(h_img, w_img, 3),
            "linear": linear.reshape(h_img, w_img, 3),
            "alpha": alpha.reshape(h_img, w_img)}


def optimize_test_lighting(bundle: RenderBundle, camera: Camera,
                           image: np.ndarray, steps: int = 1000,
                           lr: float = 1e-2, n_samples: int = 32,
                           chunk: int = 4096, tau_d: float | None = None,
                           init: tuple | None = None) -> tuple:
    """Fit an SH light and tone gamma to one held-out view of the trained
    object, keeping everything else frozen.

    Geometry and material quantities are cached up front (they do not
    depend on the light), so each of the descent steps only re-evaluates
    SH products and the tone curve. The step size backtracks: a step that
    does not decrease the loss is rejected and the rate halves, so the
    recorded loss is nonincreasing. Starts from the nearest training
    image's light unless `init` = (light, gamma) is given.

    Returns (light (16, 3), gamma, info dict).
    """
    field = bundle.frozen_field()
    bbox = bundle.bbox()
    h_img, w_img = camera.height, camera.width
    target = np.asarray(image, dtype=np.float64).reshape(-1, 3)
    if len(target) != h_img * w_img:
        raise ValueError("image does not match the camera size")
    ys, xs = np.mgrid[0:h_img, 0:w_img]
    px_all = np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=-1)

    # one-time cache: shading points, compositing constants, material
    exp_pts, exp_alpha, exp_rows, exp_wout = [], [], [], []
    all_pts, all_w, all_bg, all_rows, all_wout = [], [], [], [], []
    for lo in range(0, len(px_all), chunk):
        px = px_all[lo:lo + chunk]
        o, d = camera.pixel_rays(px)
        near = np.full(len(px), camera.near)
        far = np.full(len(px), camera.far)
        if bbox is not None:
            t0, t1, hit = volume.ray_box_range(o, d, bbox[0], bbox[1],
                                               near, far)
        else:
            t0, t1, hit = near, far, np.ones(len(px), dtype=bool)
        h = np.nonzero(hit)[0]
        if len(h) == 0:
            continue
        depths = volume.sample_stratified(None, t0[h], t1[h], n_samples,
                                          jitter=False)
        flat = (o[h, None, :] + d[h, None, :] * depths[..., None]).reshape(-1, 3)
        sigma = field.density_np(flat).reshape(len(h), n_samples)
        deltas = volume.segment_lengths(depths, t0[h])
        tau = deltas * sigma
        trans = np.exp(-np.concatenate([np.zeros((len(h), 1)),
                                        np.cumsum(tau, -1)[:, :-1]], axis=-1))
        w = trans * (1.0 - np.exp(-tau))
        opacity = 1.0 - np.exp(-tau.sum(-1))
        e_d, var, fgflag = volume.depth_stats(deltas, sigma, depths)
        gate = (t1[h] - t0[h]) / TAU_D_DIVISOR if tau_d is None else tau_d
        use_exp = fgflag & (var < gate)
        e_rows = np.nonzero(use_exp)[0]
        a_rows = np.nonzero(fgflag & ~use_exp)[0]
        if len(e_rows):
            r = h[e_rows]
            exp_pts.append(o[r] + e_d[e_rows, None] * d[r])
            exp_alpha.append(opacity[e_rows])
            exp_rows.append(lo + r)
            exp_wout.append(-d[r])
        if len(a_rows):
            r = h[a_rows]
            all_pts.append((o[r, None, :] + d[r, None, :]
                            * depths[a_rows][..., None]).reshape(-1, 3))
            all_w.append(w[a_rows])
            all_bg.append(1.0 - opacity[a_rows])
            all_rows.append(lo + r)
            all_wout.append(np.repeat(-d[r], n_samples, axis=0))

    if not exp_pts and not all_pts:
        raise NumericsError("no foreground rays: the camera does not see "
                            "the object")

    def _mat(pts, wout):
        x = ad.constant(pts)
        feat = field.trunk_features(x)
        normal, k_d, k_s, gloss = field.material(x, feat)
        return (normal.value, k_d.value, k_s.value, gloss.value, wout)

    cache_e = cache_a = None
    if exp_pts:
        pts = np.concatenate(exp_pts)
        cache_e = _mat(pts, np.concatenate(exp_wout))
        alpha_e = np.concatenate(exp_alpha)[:, None]
        rows_e = np.concatenate(exp_rows)
    if all_pts:
        pts = np.concatenate(all_pts)
        cache_a = _mat(pts, np.concatenate(all_wout))
        w_a = np.concatenate(all_w)
        bg_a = np.concatenate(all_bg)[:, None]
        rows_a = np.concatenate(all_rows)

    shaded = np.zeros(len(px_all), dtype=bool)
    if cache_e is not None:
        shaded[rows_e] = True
    if cache_a is not None:
        shaded[rows_a] = True
    bg_resid = float(((1.0 - target[~shaded]) ** 2).sum())
    denom = target.size

    if init is None:
        k = bundle.nearest_train_index(camera)
        light0, gamma0 = bundle.light(k), bundle.gamma(k)
    else:
        light0, gamma0 = np.array(init[0], dtype=np.float64), float(init[1])

    light = ad.leaf(light0.copy())
    gamma = ad.leaf(np.array([gamma0]))

    def loss_graph():
        lv = ad.reshape(light, (1, 16, 3))
        parts, rows = [], []
        if cache_e is not None:
            n, kd, ks, gl, wo = cache_e
            c = shade_point(lv, ad.constant(n), ad.constant(wo),
                            ad.constant(kd), ad.constant(ks), ad.constant(gl))
            parts.append(c * ad.constant(alpha_e) + ad.constant(1.0 - alpha_e))
            rows.append(rows_e)
        if cache_a is not None:
            n, kd, ks, gl, wo = cache_a
            c = shade_point(lv, ad.constant(n), ad.constant(wo),
                            ad.constant(kd), ad.constant(ks), ad.constant(gl))
            c3 = ad.reshape(c, (len(rows_a), n_samples, 3))
            acc = ad.vsum(ad.constant(w_a[..., None]) * c3, axis=1)
            parts.append(acc + ad.constant(bg_a))
            rows.append(rows_a)
        lin = ad.concat(parts, axis=0)
        enc = tone_map(lin, ad.reshape(gamma, (1, 1)))
        tgt = ad.constant(target[np.concatenate(rows)])
        sq = ad.vsum(ad.square(enc - tgt))
        return (sq + bg_resid) / denom

    cur = loss_graph()
    info = {"init_mse": float(cur.value), "accepted": 0}
    rate = lr
    for _ in range(steps):
        light.grad = None
        gamma.grad = None
        ad.backward(cur)
        l_try = light.value - rate * light.grad
        g_try = gamma.value - rate * gamma.grad
        keep_l, keep_g = light.value, gamma.value
        light.value, gamma.value = l_try, g_try
        trial = loss_graph()
        if trial.value <= cur.value and np.isfinite(trial.value):
            cur = trial
            rate *= 1.1
            info["accepted"] += 1
        else:
            light.value, gamma.value = keep_l, keep_g
            rate *= 0.5
    info["mse"] = float(cur.value)
    info["lr_final"] = rate
    return light.value.copy(), float(gamma.value[0]), info
