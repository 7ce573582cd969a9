"""Synthetic scenes with exact ground truth.

Analytic solids (constant density inside), known materials, known lighting,
and images rendered by the hemisphere Monte-Carlo integrator, so every stage
of the pipeline can be checked against the truth that produced its inputs.
A generated dataset is bit-identical for the same (spec, seed): the seed
only drives view jitter, random lighting, and sampling noise.

Alongside the standard dataset layout a `gt/` sidecar holds per-view light
coefficients (text, 48 numbers), per-view world-space normal maps (.npy),
and `scene.json` with the solids, materials, and generation parameters.
"""

from dataclasses import dataclass, asdict
from pathlib import Path
import json

import numpy as np

from .cameras import Camera, look_at
from .data import SceneDataset, save_dataset
from .shading import SH_DC as _SH_DC, eval_sh, mc_shade, save_sh_text, tone_map_np

GT_GAMMA = 2.4


@dataclass
class Primitive:
    kind: str                  # "sphere" or "box"
    center: tuple
    size: object               # sphere: radius; box: (hx, hy, hz) halfwidths
    k_d: tuple
    k_s: float = 0.0
    gloss: float = 20.0

    def __post_init__(self):
        if self.kind not in ("sphere", "box"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")

    @property
    def _c(self):
        return np.asarray(self.center, dtype=np.float64)

    @property
    def _h(self):
        if self.kind == "sphere":
            return np.full(3, float(self.size))
        return np.asarray(self.size, dtype=np.float64)

    def extent(self) -> float:
        """Farthest distance from the origin reached by this solid."""
        return float(np.linalg.norm(self._c) + np.linalg.norm(self._h))

    def inside(self, pts: np.ndarray) -> np.ndarray:
        p = np.asarray(pts, dtype=np.float64) - self._c
        if self.kind == "sphere":
            return (p * p).sum(-1) <= float(self.size) ** 2
        return (np.abs(p) <= self._h).all(-1)

    def hit(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """First intersection depth per ray, +inf for a miss."""
        o = np.asarray(origins, dtype=np.float64) - self._c
        d = np.asarray(dirs, dtype=np.float64)
        if self.kind == "sphere":
            r = float(self.size)
            b = (o * d).sum(-1)
            disc = b * b - ((o * o).sum(-1) - r * r)
            root = np.sqrt(np.maximum(disc, 0.0))
            t = -b - root
            return np.where((disc > 0) & (t > 1e-6), t, np.inf)
        with np.errstate(divide="ignore"):
            inv = 1.0 / d
        lo = (-self._h - o) * inv
        hi = (self._h - o) * inv
        tmin = np.minimum(lo, hi).max(-1)
        tmax = np.maximum(lo, hi).min(-1)
        return np.where((tmax >= tmin) & (tmin > 1e-6), tmin, np.inf)

    def normal(self, pts: np.ndarray) -> np.ndarray:
        p = np.asarray(pts, dtype=np.float64) - self._c
        if self.kind == "sphere":
            return p / np.linalg.norm(p, axis=-1, keepdims=True)
        q = p / self._h
        axis = np.argmax(np.abs(q), axis=-1)
        n = np.zeros_like(p)
        rows = np.arange(len(n))
        n[rows, axis] = np.sign(q[rows, axis])
        return n


@dataclass
class SynthSpec:
    name: str
    primitives: list
    n_views: int = 8
    image_size: int = 64
    light_mode: str = "fixed"        # "fixed" (constant white) or "random"
    orbit_radius: float = 2.5
    density: float = 60.0
    mc_samples: int = 4096
    n_test: int = 1
    frame_frac: float = 0.42         # projected object radius / half width
    n_points: int = 512              # surface samples written to points.txt

    def extent(self) -> float:
        return max(p.extent() for p in self.primitives)


def preset(name: str) -> SynthSpec:
    """Named scene recipes used across the test suite and the CLI."""
    if name == "sphere":
        return SynthSpec(
            name="sphere",
            primitives=[Primitive("sphere", (0.0, 0.0, 0.0), 0.5, (1.0, 0.0, 0.0))],
        )
    if name == "duo":
        return SynthSpec(
            name="duo",
            primitives=[
                Primitive("sphere", (-0.3, 0.0, 0.05), 0.35,
                          (0.8, 0.3, 0.2), k_s=0.3, gloss=40.0),
                Primitive("box", (0.35, 0.1, -0.1), (0.25, 0.35, 0.2),
                          (0.2, 0.45, 0.8)),
            ],
            n_views=10, light_mode="random", n_test=2,
        )
    if name == "toy":
        return SynthSpec(
            name="toy",
            primitives=[Primitive("sphere", (0.0, 0.0, 0.0), 0.4,
                                  (0.9, 0.35, 0.2), k_s=0.1, gloss=20.0)],
            n_views=4, image_size=32, mc_samples=2048, n_points=256,
        )
    raise ValueError(f"unknown preset {name!r}")


class SyntheticScene:
    """Solids + cameras + per-view lighting, with analytic queries."""

    def __init__(self, spec: SynthSpec, seed: int):
        self.spec = spec
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        self.cameras = self._make_cameras(rng)
        self.lights = self._make_lights(rng)
        self._point_seed = int(rng.integers(2**63))
        self._render_seeds = [int(rng.integers(2**63)) for _ in range(spec.n_views)]

    # ------------------------------------------------------------- geometry

    def density(self, pts: np.ndarray) -> np.ndarray:
        """Constant-density solids: sigma = K inside any primitive, else 0."""
        pts = np.asarray(pts, dtype=np.float64)
        occ = np.zeros(pts.shape[:-1], dtype=bool)
        for prim in self.spec.primitives:
            occ |= prim.inside(pts)
        return np.where(occ, self.spec.density, 0.0)

    def first_hit(self, origins, dirs):
        """(depths, primitive index) per ray; inf / -1 where nothing is hit."""
        ts = np.stack([p.hit(origins, dirs) for p in self.spec.primitives])
        idx = np.argmin(ts, axis=0)
        t = np.take_along_axis(ts, idx[None], axis=0)[0]
        return t, np.where(np.isfinite(t), idx, -1)

    def surface_normal(self, pts: np.ndarray, prim_idx: np.ndarray) -> np.ndarray:
        out = np.zeros_like(np.asarray(pts, dtype=np.float64))
        for i, prim in enumerate(self.spec.primitives):
            sel = prim_idx == i
            if sel.any():
                out[sel] = prim.normal(pts[sel])
        return out

    # -------------------------------------------------------------- setup

    def _make_cameras(self, rng) -> list:
        s = self.spec
        size = s.image_size
        r_obj = s.extent()
        focal = s.frame_frac * (size / 2.0) * s.orbit_radius / r_obj
        near = s.orbit_radius - 1.8 * r_obj
        far = s.orbit_radius + 1.8 * r_obj
        if near <= 0:
            raise ValueError("orbit radius too small for the scene extent")
        cams = []
        for k in range(s.n_views):
            azim = 2.0 * np.pi * k / s.n_views \
                + rng.uniform(-0.3, 0.3) * np.pi / s.n_views
            elev = np.deg2rad(22.0 if k % 2 == 0 else 38.0) \
                + np.deg2rad(rng.uniform(-4.0, 4.0))
            pos = s.orbit_radius * np.array([
                np.cos(elev) * np.cos(azim),
                np.cos(elev) * np.sin(azim),
                np.sin(elev),
            ])
            cams.append(Camera(
                rotation=look_at(pos, np.zeros(3)),
                translation=pos,
                focal=focal,
                principal=np.array([size / 2.0, size / 2.0]),
                width=size, height=size, near=near, far=far,
            ))
        return cams

    def _make_lights(self, rng) -> np.ndarray:
        s = self.spec
        lights = np.zeros((s.n_views, 16, 3))
        if s.light_mode == "fixed":
            lights[:, 0, :] = 1.0 / _SH_DC   # unit radiance everywhere
            return lights
        if s.light_mode != "random":
            raise ValueError(f"unknown light mode {s.light_mode!r}")
        probe = _fibonacci_dirs(256)
        for k in range(s.n_views):
            base = rng.uniform(0.8, 1.2)
            c = np.zeros((16, 3))
            c[0, :] = base / _SH_DC
            c[1:] = rng.normal(0.0, 0.15 * base, (15, 3))
            # keep radiance comfortably positive so gamma fits stay stable
            rad = eval_sh(c, probe)
            low = rad.min()
            floor = 0.05 * base
            if low < floor:
                c[1:] *= (base - floor) / max(base - low, 1e-9)
            lights[k] = c
        return lights

    # ------------------------------------------------------------- render

    def render_view(self, k: int):
        """Ground-truth view k.

        Returns (encoded image, mask, world normal map, linear image); the
        background is pure white, tone mapping uses the shared gamma.
        """
        s = self.spec
        cam = self.cameras[k]
        size = s.image_size
        ys, xs = np.mgrid[0:size, 0:size]
        px = np.stack([xs + 0.5, ys + 0.5], axis=-1).reshape(-1, 2)
        origins, dirs = cam.pixel_rays(px)
        t, prim_idx = self.first_hit(origins, dirs)
        hit = np.isfinite(t)
        mask = hit.reshape(size, size)

        linear = np.ones((size * size, 3))
        normals = np.zeros((size * size, 3))
        rng = np.random.default_rng(self._render_seeds[k])
        env = lambda d: eval_sh(self.lights[k], d)
        ids = np.nonzero(hit)[0]
        if len(ids):
            pts = origins[ids] + t[ids, None] * dirs[ids]
            nrm = self.surface_normal(pts, prim_idx[ids])
            normals[ids] = nrm
            for j, i in enumerate(ids):
                prim = self.spec.primitives[prim_idx[i]]
                rgb, _ = mc_shade(env, nrm[j], -dirs[i],
                                  np.asarray(prim.k_d), prim.k_s, prim.gloss,
                                  n_samples=s.mc_samples, rng=rng)
                linear[i] = np.maximum(rgb, 0.0)

        encoded = tone_map_np(linear, GT_GAMMA)
        return (encoded.reshape(size, size, 3), mask,
                normals.reshape(size, size, 3), linear.reshape(size, size, 3))

    def surface_points(self) -> np.ndarray:
        """Pseudo-reconstruction point cloud: uniform samples on the solids."""
        rng = np.random.default_rng(self._point_seed)
        areas = []
        for p in self.spec.primitives:
            if p.kind == "sphere":
                areas.append(4.0 * np.pi * float(p.size) ** 2)
            else:
                hx, hy, hz = p._h
                areas.append(8.0 * (hx * hy + hy * hz + hz * hx))
        areas = np.asarray(areas)
        counts = np.maximum(1, np.round(
            self.spec.n_points * areas / areas.sum()).astype(int))
        chunks = []
        for p, m in zip(self.spec.primitives, counts):
            if p.kind == "sphere":
                d = rng.normal(size=(m, 3))
                d /= np.linalg.norm(d, axis=-1, keepdims=True)
                chunks.append(p._c + float(p.size) * d)
            else:
                h = p._h
                face_area = np.array([h[1] * h[2], h[0] * h[2], h[0] * h[1]])
                face_area = face_area / face_area.sum()
                axis = rng.choice(3, size=m, p=face_area)
                sign = rng.choice([-1.0, 1.0], size=m)
                uv = rng.uniform(-1.0, 1.0, (m, 3)) * h
                pts = uv.copy()
                pts[np.arange(m), axis] = sign * h[axis]
                chunks.append(p._c + pts)
        return np.concatenate(chunks, axis=0)


def _fibonacci_dirs(n: int) -> np.ndarray:
    """Deterministic near-uniform unit directions (positivity probing)."""
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = i * np.pi * (3.0 - np.sqrt(5.0))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


def make_synthetic(spec: SynthSpec, seed: int, out_dir) -> SyntheticScene:
    """Render the scene and write the dataset plus the ground-truth sidecar."""
    scene = SyntheticScene(spec, seed)
    out = Path(out_dir)
    names = [f"view_{k:03d}" for k in range(spec.n_views)]
    images, masks = [], []
    gt_dir = out / "gt"
    gt_dir.mkdir(parents=True, exist_ok=True)
    for k in range(spec.n_views):
        encoded, mask, normal_map, _ = scene.render_view(k)
        images.append(encoded)
        masks.append(mask)
        np.save(gt_dir / f"normal_{names[k]}.npy", normal_map.astype(np.float32))
        save_sh_text(gt_dir / f"light_{names[k]}.txt", scene.lights[k])

    n_train = spec.n_views - spec.n_test
    ds = SceneDataset(
        root=out, names=names, images=images, masks=masks,
        cameras=scene.cameras, points=scene.surface_points(),
        train_idx=list(range(n_train)),
        test_idx=list(range(n_train, spec.n_views)),
    )
    save_dataset(ds, out)

    doc = asdict(spec)
    doc["seed"] = scene.seed
    doc["gamma"] = GT_GAMMA
    with open(gt_dir / "scene.json", "w") as f:
        json.dump(doc, f, indent=1, default=list)
    return scene
