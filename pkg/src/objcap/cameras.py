"""Pinhole cameras, refinement deltas, epipolar geometry.

Conventions: R maps camera coordinates to world (columns are the camera
axes in world space), t is the camera center, so x_world = R x_cam + t.
The camera looks down +z; pixel (u, v) with principal point (cx, cy) and
focal f maps to the camera-space direction ((u-cx)/f, (v-cy)/f, 1).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad


class CameraError(ValueError):
    pass


@dataclass
class Camera:
    rotation: np.ndarray      # (3,3) camera-to-world
    translation: np.ndarray   # (3,) camera center in world
    focal: float
    principal: np.ndarray     # (2,) cx, cy in pixels
    width: int
    height: int
    near: float
    far: float

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.principal = np.asarray(self.principal, dtype=np.float64).reshape(2)
        self.focal = float(self.focal)
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-6:
            raise CameraError(f"rotation not orthonormal (max deviation {err:.2e})")
        if self.focal <= 0:
            raise CameraError("focal must be positive")
        if not (0 < self.near < self.far):
            raise CameraError(f"need 0 < near < far, got {self.near}, {self.far}")

    @property
    def center(self) -> np.ndarray:
        return self.translation

    def intrinsics(self) -> np.ndarray:
        cx, cy = self.principal
        return np.array([[self.focal, 0.0, cx],
                         [0.0, self.focal, cy],
                         [0.0, 0.0, 1.0]])

    def pixel_rays(self, px: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World-space rays through continuous pixel coords px (..., 2).

        Returns (origins, unit directions) with origins broadcast to px.
        Coordinates must lie in [0, W] x [0, H].
        """
        px = np.asarray(px, dtype=np.float64)
        u, v = px[..., 0], px[..., 1]
        if np.any(u < 0) or np.any(u > self.width) or np.any(v < 0) or np.any(v > self.height):
            raise CameraError("pixel coordinates out of image bounds")
        d_cam = np.stack([(u - self.principal[0]) / self.focal,
                          (v - self.principal[1]) / self.focal,
                          np.ones_like(u)], axis=-1)
        d_world = d_cam @ self.rotation.T
        d_world = d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)
        origins = np.broadcast_to(self.translation, d_world.shape).copy()
        return origins, d_world

    def project(self, x_world: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World points (..., 3) -> pixel coords (..., 2) and depth along +z.

        Points at or behind the camera plane get NaN pixels.
        """
        x = np.asarray(x_world, dtype=np.float64)
        x_cam = (x - self.translation) @ self.rotation
        z = x_cam[..., 2]
        safe = np.where(z > 1e-12, z, np.nan)
        u = self.focal * x_cam[..., 0] / safe + self.principal[0]
        v = self.focal * x_cam[..., 1] / safe + self.principal[1]
        return np.stack([u, v], axis=-1), z

    def to_dict(self) -> dict:
        return {
            "R": self.rotation.tolist(),
            "t": self.translation.tolist(),
            "focal": self.focal,
            "principal": self.principal.tolist(),
            "width": self.width,
            "height": self.height,
            "near": self.near,
            "far": self.far,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(rotation=np.array(d["R"], dtype=np.float64),
                   translation=np.array(d["t"], dtype=np.float64),
                   focal=d["focal"],
                   principal=np.array(d["principal"], dtype=np.float64),
                   width=int(d["width"]), height=int(d["height"]),
                   near=float(d["near"]), far=float(d["far"]))


def look_at(center: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world rotation for a camera at `center` looking at `target`.

    +z forward, +x right, +y down (image rows grow downward).
    """
    center = np.asarray(center, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - center
    fwd = fwd / np.linalg.norm(fwd)
    upv = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, upv)
    nr = np.linalg.norm(right)
    if nr < 1e-9:  # looking along up; pick any perpendicular
        right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
        nr = np.linalg.norm(right)
    right = right / nr
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd], axis=1)


# ---------------------------------------------------------------------------
# axis-angle


def rotation_from_axis_angle(v: np.ndarray) -> np.ndarray:
    """exp([v]x) via R = I + A [v]x + B [v]x^2, series-stable near zero."""
    v = np.asarray(v, dtype=np.float64).reshape(3)
    s = float(v @ v)
    a = float(ad._rot_a_np(np.array(s)))
    b = float(ad._rot_b_np(np.array(s)))
    k = np.array([[0.0, -v[2], v[1]],
                  [v[2], 0.0, -v[0]],
                  [-v[1], v[0], 0.0]])
    return np.eye(3) + a * k + b * (k @ k)


@dataclass
class CameraDelta:
    """Trainable per-image refinement: rotation (axis-angle), center shift,
    focal shift."""
    rot: np.ndarray
    trans: np.ndarray
    focal: float

    @classmethod
    def zero(cls) -> "CameraDelta":
        return cls(np.zeros(3), np.zeros(3), 0.0)


def apply_delta(cam: Camera, delta: CameraDelta) -> Camera:
    dr = rotation_from_axis_angle(np.asarray(delta.rot, dtype=np.float64))
    return replace(cam,
                   rotation=dr @ cam.rotation,
                   translation=cam.translation + np.asarray(delta.trans, dtype=np.float64),
                   focal=cam.focal + float(delta.focal))


def perturb_cameras(cams: list[Camera], rot_deg: float,
                    seed: int = 0) -> list[Camera]:
    """Rotate every camera by `rot_deg` about a random (seeded) axis.

    Pose-refinement experiments start from these corrupted poses and are
    scored against the originals.
    """
    rng = np.random.default_rng(seed)
    out = []
    for cam in cams:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        v = axis * np.deg2rad(rot_deg)
        out.append(replace(cam, rotation=rotation_from_axis_angle(v) @ cam.rotation))
    return out


def _cross_dv(a: ad.DiffValue, b: ad.DiffValue) -> ad.DiffValue:
    ax, ay, az = a[:, 0:1], a[:, 1:2], a[:, 2:3]
    bx, by, bz = b[:, 0:1], b[:, 1:2], b[:, 2:3]
    return ad.concat([ay * bz - az * by,
                      az * bx - ax * bz,
                      ax * by - ay * bx], axis=-1)


def rotate_by_axis_angle_dv(delta: ad.DiffValue, v: ad.DiffValue) -> ad.DiffValue:
    """Rodrigues applied rowwise: v' = v + A (d x v) + B (d x (d x v)).

    delta (N,3) differentiable, v (N,3). A, B are smooth functions of
    s = |d|^2, so gradients stay finite through zero rotation.
    """
    s = ad.vsum(ad.square(delta), axis=-1, keepdims=True)
    a = ad.rot_coef_a(s)
    b = ad.rot_coef_b(s)
    c1 = _cross_dv(delta, v)
    c2 = _cross_dv(delta, c1)
    return v + a * c1 + b * c2


def rays_with_delta(cams: list[Camera], cam_idx: np.ndarray, px: np.ndarray,
                    rot: ad.DiffValue, trans: ad.DiffValue,
                    focal: ad.DiffValue) -> tuple[ad.DiffValue, ad.DiffValue]:
    """Differentiable ray generation through per-image refinement deltas.

    cams: base cameras. cam_idx (B,) int, px (B,2) pixel coords.
    rot (N,3), trans (N,3), focal (N,1) are the delta parameter tensors.
    Returns origins (B,3) and unit directions (B,3) as graph nodes.
    """
    cam_idx = np.asarray(cam_idx)
    px = np.asarray(px, dtype=np.float64)
    n = px.shape[0]

    base_r = np.stack([c.rotation for c in cams])        # (N,3,3)
    base_t = np.stack([c.translation for c in cams])     # (N,3)
    base_f = np.array([c.focal for c in cams])           # (N,)
    base_cp = np.stack([c.principal for c in cams])      # (N,2)

    r_rows = base_r[cam_idx]                              # (B,3,3)
    cp = base_cp[cam_idx]

    f = ad.take_rows(focal, cam_idx) + ad.constant(base_f[cam_idx, None])  # (B,1)
    uv = px - cp
    # camera-space direction, focal in the graph
    d_cam_xy = ad.constant(uv) / f                        # (B,2)
    d_cam = ad.concat([d_cam_xy, ad.constant(np.ones((n, 1)))], axis=-1)

    # base rotation rowwise: d_world0[i] = R_i d_cam[i]
    d0 = ad.concat([ad.vsum(d_cam * ad.constant(r_rows[:, 0, :]), axis=-1, keepdims=True),
                    ad.vsum(d_cam * ad.constant(r_rows[:, 1, :]), axis=-1, keepdims=True),
                    ad.vsum(d_cam * ad.constant(r_rows[:, 2, :]), axis=-1, keepdims=True)],
                   axis=-1)
    dr = ad.take_rows(rot, cam_idx)
    d_world = rotate_by_axis_angle_dv(dr, d0)
    d_world = ad.normalize_last(d_world)

    origins = ad.constant(base_t[cam_idx]) + ad.take_rows(trans, cam_idx)
    return origins, d_world


# ---------------------------------------------------------------------------
# epipolar geometry


def _cross_matrix(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def normalize_fundamental(f: np.ndarray) -> np.ndarray:
    """Unit Frobenius norm; sign fixed so the first entry (row-major scan)
    with magnitude above 1e-12 is positive."""
    f = np.asarray(f, dtype=np.float64)
    n = np.linalg.norm(f)
    if n < 1e-15:
        raise CameraError("cannot normalize a zero fundamental matrix")
    f = f / n
    for x in f.reshape(-1):
        if abs(x) > 1e-12:
            if x < 0:
                f = -f
            break
    return f


def fundamental_matrix(cam_i: Camera, cam_j: Camera) -> np.ndarray | None:
    """Normalized fundamental matrix mapping pixels of cam_i to epipolar
    lines in cam_j (p_j^T F p_i = 0). None when the centers coincide."""
    r_rel = cam_j.rotation.T @ cam_i.rotation
    t_rel = cam_j.rotation.T @ (cam_i.translation - cam_j.translation)
    if np.linalg.norm(t_rel) < 1e-12:
        return None
    e = _cross_matrix(t_rel) @ r_rel
    f = np.linalg.inv(cam_j.intrinsics()).T @ e @ np.linalg.inv(cam_i.intrinsics())
    return normalize_fundamental(f)


def fmse(cams_gt: list[Camera], cams_pred: list[Camera]) -> float:
    """Mean squared Frobenius distance of normalized fundamental matrices
    over all ordered camera pairs. Invariant to a global similarity
    transform applied to either set."""
    n = len(cams_gt)
    if n != len(cams_pred):
        raise CameraError("camera lists differ in length")
    if n < 2:
        raise CameraError("need at least two cameras")
    total = 0.0
    count = 0
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            fg = fundamental_matrix(cams_gt[i], cams_gt[j])
            fp = fundamental_matrix(cams_pred[i], cams_pred[j])
            if fg is None or fp is None:
                raise CameraError(f"degenerate camera pair ({i}, {j})")
            total += float(np.sum((fg - fp) ** 2))
            count += 1
    return total / count


def similarity_transform(cams: list[Camera], scale: float, rot: np.ndarray,
                         shift: np.ndarray) -> list[Camera]:
    """Apply x -> scale * rot @ x + shift to every camera pose (test helper
    for the FMSE invariance property; intrinsics untouched)."""
    out = []
    for c in cams:
        out.append(replace(c,
                           rotation=rot @ c.rotation,
                           translation=scale * rot @ c.translation + shift))
    return out
