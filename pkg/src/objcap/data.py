"""Dataset ingestion and the per-epoch ray pool.

Layout on disk::

    scene/
      images/*.png      8-bit color
      masks/*.png       8-bit, 0 = background, 255 = foreground
      cameras.json      {"images": [{"file": ..., <camera fields>}, ...]}
      points.txt        optional, one "x y z" per line (sparse geometry)
      split.json        optional, {"train": [names], "test": [names]}

Training targets keep the file's pixel encoding (the learned per-image gamma
absorbs it); background pixels are replaced by pure white so the model is
never asked to reproduce clutter it cannot see from other views.
"""

from dataclasses import dataclass, field
from pathlib import Path
import json

import numpy as np
from PIL import Image
from scipy import ndimage

from .cameras import Camera


class DatasetError(ValueError):
    pass


def load_image(path) -> np.ndarray:
    """PNG -> float64 (H, W, 3) in [0, 1], native encoding."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def load_mask(path) -> np.ndarray:
    """8-bit mask -> bool (H, W); anything at or above half range counts."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.uint8)
    return arr >= 128


def save_image(path, img: np.ndarray) -> None:
    arr = np.clip(np.asarray(img), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8)).save(path)


def save_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path)


def dilate_mask(mask: np.ndarray, radius: int) -> np.ndarray:
    """Euclidean dilation by `radius` pixels (mask-degradation experiments)."""
    if radius <= 0:
        return mask
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    disk = yy * yy + xx * xx <= r * r
    return ndimage.binary_dilation(mask, structure=disk)


def white_composite(img: np.ndarray, mask: np.ndarray) -> np.ndarray:
    out = img.copy()
    out[~mask] = 1.0
    return out


@dataclass
class SceneDataset:
    root: Path
    names: list            # image stems, cameras.json order
    images: list           # (H, W, 3) float64, white outside mask
    masks: list            # (H, W) bool
    cameras: list          # Camera per image
    points: np.ndarray = None      # (P, 3) or None
    train_idx: list = field(default_factory=list)
    test_idx: list = field(default_factory=list)

    def __len__(self):
        return len(self.names)

    def bbox(self, pad: float = 0.05):
        """Axis-aligned bounds of the sparse points, padded; None without points."""
        if self.points is None or len(self.points) == 0:
            return None
        lo = self.points.min(axis=0)
        hi = self.points.max(axis=0)
        margin = pad * (hi - lo).max()
        return lo - margin, hi + margin


def load_dataset(path, mask_dilate: int = 0) -> SceneDataset:
    """Read and validate a scene directory.

    Every camera entry must have an image and a mask of matching size;
    errors name the offending file.  `mask_dilate` grows every mask by the
    given pixel radius before compositing (imperfect-mask experiments).
    """
    root = Path(path)
    cam_file = root / "cameras.json"
    if not cam_file.is_file():
        raise DatasetError(f"missing {cam_file}")
    with open(cam_file) as f:
        meta = json.load(f)
    entries = meta.get("images")
    if not entries:
        raise DatasetError(f"{cam_file} has no image entries")

    names, images, masks, cameras = [], [], [], []
    for entry in entries:
        fname = entry["file"]
        stem = Path(fname).stem
        img_path = root / "images" / fname
        msk_path = root / "masks" / fname
        if not img_path.is_file():
            raise DatasetError(f"missing image {img_path}")
        if not msk_path.is_file():
            raise DatasetError(f"missing mask {msk_path}")
        img = load_image(img_path)
        mask = load_mask(msk_path)
        if mask.shape != img.shape[:2]:
            raise DatasetError(
                f"mask size {mask.shape} != image size {img.shape[:2]} for {fname}")
        cam = Camera.from_dict(entry)
        if (cam.height, cam.width) != img.shape[:2]:
            raise DatasetError(
                f"camera size {(cam.height, cam.width)} != image size "
                f"{img.shape[:2]} for {fname}")
        if mask_dilate:
            mask = dilate_mask(mask, mask_dilate)
        names.append(stem)
        images.append(white_composite(img, mask))
        masks.append(mask)
        cameras.append(cam)

    points = None
    pts_file = root / "points.txt"
    if pts_file.is_file():
        points = np.loadtxt(pts_file, dtype=np.float64).reshape(-1, 3)

    train_idx = list(range(len(names)))
    test_idx = []
    split_file = root / "split.json"
    if split_file.is_file():
        with open(split_file) as f:
            split = json.load(f)
        by_name = {n: i for i, n in enumerate(names)}
        try:
            train_idx = [by_name[n] for n in split["train"]]
            test_idx = [by_name[n] for n in split.get("test", [])]
        except KeyError as e:
            raise DatasetError(f"split.json names unknown image {e}")
        if not train_idx:
            raise DatasetError("split.json leaves no training images")

    return SceneDataset(root=root, names=names, images=images, masks=masks,
                        cameras=cameras, points=points,
                        train_idx=train_idx, test_idx=test_idx)


def save_dataset(ds: SceneDataset, path) -> None:
    """Write a dataset in the standard layout (cameras and masks lossless)."""
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for name, img, mask, cam in zip(ds.names, ds.images, ds.masks, ds.cameras):
        fname = name + ".png"
        save_image(root / "images" / fname, img)
        save_mask(root / "masks" / fname, mask)
        entry = {"file": fname}
        entry.update(cam.to_dict())
        entries.append(entry)
    with open(root / "cameras.json", "w") as f:
        json.dump({"images": entries}, f, indent=1)
    if ds.points is not None:
        np.savetxt(root / "points.txt", ds.points, fmt="%.17g")
    if ds.test_idx or ds.train_idx != list(range(len(ds))):
        split = {"train": [ds.names[i] for i in ds.train_idx],
                 "test": [ds.names[i] for i in ds.test_idx]}
        with open(root / "split.json", "w") as f:
            json.dump(split, f, indent=1)


class RayPool:
    """Every training pixel as a flat record, rebalanced once per epoch.

    Object pixels are scarce relative to background, so each epoch drops a
    random subset of background rays until background <= 2x foreground, then
    shuffles.  Foreground rays are never dropped.
    """

    def __init__(self, dataset: SceneDataset):
        img_idx, px, py, fg, rgb = [], [], [], [], []
        for i in dataset.train_idx:
            mask = dataset.masks[i]
            h, w = mask.shape
            ys, xs = np.mgrid[0:h, 0:w]
            img_idx.append(np.full(h * w, i, dtype=np.int64))
            px.append(xs.ravel())
            py.append(ys.ravel())
            fg.append(mask.ravel())
            rgb.append(dataset.images[i].reshape(-1, 3))
        self.img_idx = np.concatenate(img_idx)
        self.px = np.concatenate(px).astype(np.float64) + 0.5
        self.py = np.concatenate(py).astype(np.float64) + 0.5
        self.fg = np.concatenate(fg)
        self.rgb = np.concatenate(rgb, axis=0)
        self.n_foreground = int(self.fg.sum())
        self.n_background = int(len(self.fg) - self.n_foreground)
        if self.n_foreground == 0:
            raise DatasetError("dataset has no foreground pixels")

    def __len__(self):
        return len(self.fg)

    def rebalance(self, seed: int, max_bg_ratio: float = 2.0,
                  adaptive: bool = True) -> np.ndarray:
        """Epoch order: indices into the pool arrays, deterministic per seed."""
        rng = np.random.default_rng(seed)
        fg_ids = np.nonzero(self.fg)[0]
        bg_ids = np.nonzero(~self.fg)[0]
        limit = int(max_bg_ratio * len(fg_ids))
        if adaptive and len(bg_ids) > limit:
            keep = rng.choice(len(bg_ids), size=limit, replace=False)
            bg_ids = bg_ids[np.sort(keep)]
        order = np.concatenate([fg_ids, bg_ids])
        rng.shuffle(order)
        return order
