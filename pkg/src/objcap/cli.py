"""Command-line pipeline driver.

Subcommands cover the full workflow: synthetic data generation, the two
training stages, normal-grid extraction, and the application renders
(novel view, relighting orbit, background composite, metric report).

Exit codes: 0 success, 2 bad input, 3 numeric failure. Outputs are not
left half-written: single-file outputs are produced only after their
command finished computing, generated directories are removed when the
command that created them fails, and a diverging trainer keeps its last
good checkpoint by contract (the error message names it).
"""

import argparse
import dataclasses
import json
import os
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from .cameras import Camera, fmse, look_at
from .data import load_dataset, load_image, save_image
from .evaluation import metrics, write_report
from .fields import FieldConfig
from .losses import LossWeights
from .optim import GradientError
from .shading import load_envmap, load_sh_text, project_envmap, tone_map_np
from .synthetic import Primitive, SynthSpec, make_synthetic, preset
from .training import (GeometryTrainer, NumericsError, RenderBundle,
                       RenderingTrainer, TrainConfig, extract_normals,
                       optimize_test_lighting, render_image)


# ------------------------------------------------------------ argument glue


def _load_config(spec: str):
    """Named preset or JSON override file -> (TrainConfig, FieldConfig,
    LossWeights).

    A file holds {"base": name, "train": {...}, "field": {...},
    "weights": {...}}; omitted sections inherit from the base preset
    (default "desk").
    """
    if spec == "desk":
        return TrainConfig.desk(), FieldConfig.desk(), LossWeights()
    if spec == "full":
        return TrainConfig(), FieldConfig(), LossWeights()
    p = Path(spec)
    if not p.is_file():
        raise ValueError(f"config {spec!r} is neither a preset (desk, full) "
                         "nor a file")
    d = json.loads(p.read_text())
    base = d.get("base", "desk")
    if base not in ("desk", "full"):
        raise ValueError(f"config base must be desk or full, got {base!r}")
    unknown = set(d) - {"base", "train", "field", "weights"}
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    tc, fc, lw = _load_config(base)
    tc = TrainConfig.from_dict({**tc.to_dict(), **d.get("train", {})})
    fc = FieldConfig.from_dict({**fc.to_dict(), **d.get("field", {})})
    lw = LossWeights(**{**dataclasses.asdict(lw), **d.get("weights", {})})
    return tc, fc, lw


def _scene_spec(arg: str) -> SynthSpec:
    """Preset name or scene JSON file -> SynthSpec."""
    p = Path(arg)
    if not (p.suffix == ".json" or p.is_file()):
        return preset(arg)
    d = json.loads(p.read_text())
    prims = []
    for q in d["primitives"]:
        size = q["size"]
        prims.append(Primitive(kind=q["kind"], center=tuple(q["center"]),
                               size=size if np.isscalar(size) else tuple(size),
                               k_d=tuple(q["k_d"]), k_s=q.get("k_s", 0.0),
                               gloss=q.get("gloss", 20.0)))
    fields = {f.name for f in dataclasses.fields(SynthSpec)}
    unknown = set(d) - fields
    if unknown:
        raise ValueError(f"unknown scene spec fields: {sorted(unknown)}")
    extra = {k: v for k, v in d.items() if k in fields - {"name", "primitives"}}
    return SynthSpec(name=d.get("name", p.stem), primitives=prims, **extra)


def _train_indices(bundle: RenderBundle) -> list:
    return [int(i) for i in
            bundle.meta.get("train_idx") or range(len(bundle.cameras))]


def _camera_arg(arg: str, bundle: RenderBundle) -> Camera:
    """Image index (refined training pose) or camera JSON file."""
    if arg.lstrip("+-").isdigit():
        i = int(arg)
        if not 0 <= i < len(bundle.cameras):
            raise ValueError(f"camera index {i} out of range "
                             f"0..{len(bundle.cameras) - 1}")
        return bundle.cameras[i]
    return Camera.from_dict(json.loads(Path(arg).read_text()))


def _transfer_gamma(bundle: RenderBundle) -> float:
    """Tone curve to pair with an external light: median trained gamma."""
    return float(np.median([bundle.gamma(i) for i in _train_indices(bundle)]))


def _light_arg(arg: str, bundle: RenderBundle):
    """SH coefficient file, equirect envmap, or training-image index ->
    (light (16, 3), gamma)."""
    if arg.lstrip("+-").isdigit():
        i = int(arg)
        if i not in _train_indices(bundle):
            raise ValueError(f"image index {i} is not a training image")
        return bundle.light(i), bundle.gamma(i)
    p = Path(arg)
    if p.suffix == ".txt":
        light = np.asarray(load_sh_text(p), dtype=np.float64)
        if light.shape != (16, 3):
            raise ValueError(f"SH file must hold 16 x 3 coefficients, "
                             f"got {light.shape}")
        return light, _transfer_gamma(bundle)
    return project_envmap(load_envmap(p)), _transfer_gamma(bundle)


def _orbit_cameras(bundle: RenderBundle, k: int) -> list:
    """K poses on a circle around the bbox center at the mean training
    radius and elevation, reusing the first training camera's intrinsics."""
    if k < 1:
        raise ValueError("orbit needs at least one frame")
    cams = [bundle.cameras[i] for i in _train_indices(bundle)]
    box = bundle.bbox()
    center = (box[0] + box[1]) / 2.0 if box is not None else np.zeros(3)
    rel = np.array([c.translation - center for c in cams])
    dist = np.linalg.norm(rel, axis=1)
    radius = float(dist.mean())
    elev = float(np.arcsin(np.clip(rel[:, 2] / dist, -1.0, 1.0)).mean())
    half = 0.5 * float(np.linalg.norm(box[1] - box[0])) if box is not None \
        else 0.5 * radius
    near = max(radius - 1.8 * half, 1e-3 * radius)
    far = radius + 1.8 * half
    tmpl = cams[0]
    out = []
    for j in range(k):
        az = 2.0 * np.pi * j / k
        pos = center + radius * np.array([np.cos(elev) * np.cos(az),
                                          np.cos(elev) * np.sin(az),
                                          np.sin(elev)])
        out.append(Camera(rotation=look_at(pos, center), translation=pos,
                          focal=tmpl.focal, principal=tmpl.principal,
                          width=tmpl.width, height=tmpl.height,
                          near=near, far=far))
    return out


def _rmtree_if_created(path: Path, created: bool) -> None:
    if created and path.exists():
        shutil.rmtree(path, ignore_errors=True)


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    spec = _scene_spec(args.spec)
    out = Path(args.out)
    created = not out.exists()
    try:
        make_synthetic(spec, seed=args.seed, out_dir=out)
    except BaseException:
        _rmtree_if_created(out, created)
        raise
    print(f"wrote {spec.name!r} dataset ({spec.n_views} views, "
          f"{spec.image_size}px) to {out}")
    return 0


def _apply_common_train_flags(tc: TrainConfig, args) -> TrainConfig:
    tc = dataclasses.replace(tc, threads=args.threads)
    if args.seed is not None:
        tc = dataclasses.replace(tc, seed=args.seed)
    return tc


def cmd_train_geometry(args) -> int:
    ds = load_dataset(args.data, mask_dilate=args.mask_dilate)
    tc, fc, lw = _load_config(args.config)
    tc = _apply_common_train_flags(tc, args)
    tc = dataclasses.replace(
        tc,
        use_transient=tc.use_transient and not args.no_transient,
        use_silhouette=tc.use_silhouette and not args.no_silhouette,
        use_adaptive=tc.use_adaptive and not args.no_adaptive,
        use_camera_opt=tc.use_camera_opt and not args.no_cam_opt)
    if args.epochs is not None:
        tc = dataclasses.replace(tc, epochs_geometry=args.epochs)
    out = Path(args.out)
    trainer = GeometryTrainer(ds, tc, fc, lw)
    ckpt = trainer.train(out.parent, ckpt_name=out.name)
    print(f"stage 1 finished ({tc.epochs_geometry} epochs): {ckpt}")
    return 0


def cmd_extract_normals(args) -> int:
    out = Path(args.out)
    try:
        grid = extract_normals(args.ckpt, out, lam=args.lam,
                               resolution=args.res, data_dir=args.data,
                               seed=args.seed)
    except BaseException:
        if out.is_file():
            out.unlink()
        raise
    conf = np.linalg.norm(grid.normals, axis=-1)
    print(f"wrote {args.res}^3 normal grid to {out} "
          f"({(conf > 0.5).sum()} cells above confidence 0.5)")
    return 0


def cmd_train_rendering(args) -> int:
    ds = load_dataset(args.data)
    tc, _, lw = _load_config(args.config)
    tc = _apply_common_train_flags(tc, args)
    tc = dataclasses.replace(
        tc,
        use_normal_loss=tc.use_normal_loss and not args.no_nel,
        use_transient=tc.use_transient and not args.no_transient,
        use_adaptive=tc.use_adaptive and not args.no_adaptive)
    if args.epochs is not None:
        tc = dataclasses.replace(tc, epochs_rendering=args.epochs)
    grid = None if args.no_nel else args.grid
    out = Path(args.out)
    trainer = RenderingTrainer(ds, args.geom, grid, tc, lw)
    ckpt = trainer.train(out.parent, ckpt_name=out.name)
    print(f"stage 2 finished ({tc.epochs_rendering} epochs): {ckpt}")
    return 0


def cmd_render(args) -> int:
    bundle = RenderBundle.load(args.ckpt)
    cam = _camera_arg(args.camera, bundle)
    light, gamma = _light_arg(args.light, bundle)
    r = render_image(bundle.frozen_field(), cam, light, gamma,
                     n_samples=args.samples, bbox=bundle.bbox(),
                     threads=args.threads)
    save_image(args.out, r["encoded"])
    print(f"rendered {cam.width}x{cam.height} view to {args.out}")
    return 0


def cmd_relight(args) -> int:
    bundle = RenderBundle.load(args.ckpt)
    light = project_envmap(load_envmap(args.envmap))
    gamma = _transfer_gamma(bundle)
    cams = _orbit_cameras(bundle, args.orbit)
    out = Path(args.out)
    created = not out.exists()
    try:
        out.mkdir(parents=True, exist_ok=True)
        field = bundle.frozen_field()
        for j, cam in enumerate(cams):
            r = render_image(field, cam, light, gamma,
                             n_samples=args.samples, bbox=bundle.bbox(),
                             threads=args.threads)
            save_image(out / f"frame_{j:03d}.png", r["encoded"])
    except BaseException:
        _rmtree_if_created(out, created)
        raise
    print(f"wrote {len(cams)} relit orbit frames to {out}")
    return 0


def cmd_composite(args) -> int:
    bundle = RenderBundle.load(args.ckpt)
    cam = _camera_arg(args.camera, bundle)
    light, gamma = _light_arg(args.envmap, bundle)
    bg = load_image(args.background)
    if bg.shape[:2] != (cam.height, cam.width):
        raise ValueError(f"background {bg.shape[1]}x{bg.shape[0]} does not "
                         f"match the camera {cam.width}x{cam.height}")
    r = render_image(bundle.frozen_field(), cam, light, gamma,
                     n_samples=args.samples, bbox=bundle.bbox(),
                     threads=args.threads)
    alpha = r["alpha"][..., None]
    # the renderer composites over white: linear = fg + (1 - alpha); peel
    # the background off, un-premultiply, tone-map the object alone, then
    # blend with straight alpha so alpha 0 passes the background through
    fg = np.clip(r["linear"] - (1.0 - alpha), 0.0, None)
    straight = np.where(alpha > 1e-8, fg / np.maximum(alpha, 1e-8), 0.0)
    encoded_fg = tone_map_np(straight, gamma)
    save_image(args.out, encoded_fg * alpha + bg * (1.0 - alpha))
    print(f"composited object over {args.background} -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    ds = load_dataset(args.data)
    bundle = RenderBundle.load(args.ckpt)
    field = bundle.frozen_field()
    rows = []
    t0 = time.time()
    for ti in ds.test_idx:
        cam = ds.cameras[ti]
        gt = ds.images[ti]
        if args.mode == "transfer":
            k = bundle.nearest_train_index(cam)
            light, gamma = bundle.light(k), bundle.gamma(k)
        else:
            light, gamma, _ = optimize_test_lighting(
                bundle, cam, gt, steps=args.steps, n_samples=args.samples)
        r = render_image(field, cam, light, gamma, n_samples=args.samples,
                         bbox=bundle.bbox(), threads=args.threads)
        row = metrics(r["encoded"], gt, alpha=r["alpha"], mask=ds.masks[ti],
                      name=ds.names[ti], mode=args.mode)
        rows.append(row)
        print(f"{ds.names[ti]}: psnr {row['psnr']:.2f} "
              f"ssim {row['ssim']:.3f} mmse {row['mmse']:.5f}")
    train_cams = [bundle.cameras[i] for i in ds.train_idx]
    scene = {"fmse": fmse([ds.cameras[i] for i in ds.train_idx], train_cams),
             "runtime": round(time.time() - t0, 3)}
    write_report(args.out, rows, scene=scene)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="objcap",
        description="Object capture pipeline: geometry from masked images, "
                    "normal extraction, lighting/material fitting, and "
                    "novel-view / relighting / compositing renders.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")
    threads_default = os.cpu_count() or 1

    def add(name, fn, help_text):
        q = sub.add_parser(name, help=help_text, description=help_text)
        q.set_defaults(func=fn)
        return q

    def render_flags(q):
        q.add_argument("--samples", type=int, default=64,
                       help="ray sample count (default 64)")
        q.add_argument("--threads", type=int, default=threads_default,
                       help="render workers; 1 guarantees bit-determinism")

    q = add("synth", cmd_synth, "generate a synthetic dataset with ground "
            "truth sidecar")
    q.add_argument("--spec", required=True,
                   help="preset name (sphere, toy, duo) or scene JSON file")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True, help="dataset directory")

    q = add("train-geometry", cmd_train_geometry,
            "stage 1: fit density, colors, transients, camera refinement")
    q.add_argument("--data", required=True, help="dataset directory")
    q.add_argument("--config", default="desk",
                   help="preset (desk, full) or JSON override file")
    q.add_argument("--out", required=True,
                   help="checkpoint path; the loss log lands beside it")
    q.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    q.add_argument("--threads", type=int, default=threads_default,
                   help="1 guarantees bit-determinism")
    q.add_argument("--epochs", type=int, default=None,
                   help="override the config epoch count")
    q.add_argument("--no-transient", action="store_true",
                   help="disable the per-image transient branch")
    q.add_argument("--no-silhouette", action="store_true",
                   help="disable the mask silhouette loss")
    q.add_argument("--no-adaptive", action="store_true",
                   help="disable adaptive foreground ray balancing")
    q.add_argument("--no-cam-opt", action="store_true",
                   help="freeze camera poses at their inputs")
    q.add_argument("--mask-dilate", type=int, default=0, metavar="R",
                   help="dilate masks by R pixels (degradation experiments)")

    q = add("extract-normals", cmd_extract_normals,
            "density checkpoint -> confidence-weighted normal grid")
    q.add_argument("--ckpt", required=True, help="stage-1 checkpoint")
    q.add_argument("--lambda", dest="lam", type=float, default=1.0,
                   help="smoothing strength (default 1.0)")
    q.add_argument("--res", type=int, default=128,
                   help="grid resolution per axis (default 128)")
    q.add_argument("--out", required=True, help="grid file")
    q.add_argument("--data", default=None,
                   help="dataset for surface visibility; default: the path "
                        "recorded in the checkpoint")
    q.add_argument("--seed", type=int, default=0,
                   help="surface pixel subsampling seed")

    q = add("train-rendering", cmd_train_rendering,
            "stage 2: fit materials, per-image lighting, tone curves")
    q.add_argument("--data", required=True, help="dataset directory")
    q.add_argument("--geom", required=True, help="stage-1 checkpoint")
    q.add_argument("--grid", default=None,
                   help="normal grid; omit to train without normal "
                        "supervision")
    q.add_argument("--config", default="desk",
                   help="preset (desk, full) or JSON override file")
    q.add_argument("--out", required=True, help="checkpoint path")
    q.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    q.add_argument("--threads", type=int, default=threads_default,
                   help="1 guarantees bit-determinism")
    q.add_argument("--epochs", type=int, default=None,
                   help="override the config epoch count")
    q.add_argument("--no-nel", action="store_true",
                   help="drop extracted-normal supervision (ignores --grid)")
    q.add_argument("--no-transient", action="store_true",
                   help="disable the stage-2 transient layer")
    q.add_argument("--no-adaptive", action="store_true",
                   help="disable adaptive foreground ray balancing")

    q = add("render", cmd_render, "render one novel view under a chosen "
            "light")
    q.add_argument("--ckpt", required=True, help="stage-2 checkpoint")
    q.add_argument("--camera", required=True,
                   help="camera JSON file or training-image index")
    q.add_argument("--light", required=True,
                   help="SH .txt file, equirect envmap image, or "
                        "training-image index")
    q.add_argument("--out", required=True, help="PNG path")
    render_flags(q)

    q = add("relight", cmd_relight, "orbit the object under a new "
            "environment light")
    q.add_argument("--ckpt", required=True, help="stage-2 checkpoint")
    q.add_argument("--envmap", required=True, help="equirect envmap image")
    q.add_argument("--orbit", type=int, default=8, metavar="K",
                   help="number of orbit frames (default 8)")
    q.add_argument("--out", required=True, help="frame directory")
    render_flags(q)

    q = add("composite", cmd_composite, "alpha-composite the object over a "
            "background image")
    q.add_argument("--ckpt", required=True, help="stage-2 checkpoint")
    q.add_argument("--background", required=True, help="background image")
    q.add_argument("--camera", required=True,
                   help="camera JSON file or training-image index")
    q.add_argument("--envmap", required=True,
                   help="equirect envmap image (or SH .txt file)")
    q.add_argument("--out", required=True, help="PNG path")
    render_flags(q)

    q = add("eval", cmd_eval, "metric report over the held-out views")
    q.add_argument("--ckpt", required=True, help="stage-2 checkpoint")
    q.add_argument("--data", required=True, help="dataset directory")
    q.add_argument("--mode", required=True, choices=("transfer", "optimize"),
                   help="lighting: nearest training image, or per-image fit")
    q.add_argument("--out", required=True, help="CSV path")
    q.add_argument("--steps", type=int, default=1000,
                   help="descent steps for --mode optimize (default 1000)")
    render_flags(q)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except KeyError as e:
        print(f"error: missing field {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (NumericsError, GradientError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
