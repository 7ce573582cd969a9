"""Training objectives for both optimization stages.

Every function here returns a scalar ``DiffValue`` ready for ``backward``.
Targets (images, masks, grid normals, sample directions) are plain arrays;
predictions come out of the graph.  Reductions are batch means so loss
magnitudes are comparable across batch sizes.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

BCE_EPS = 1e-6
GAMMA_ANCHOR = 2.4


@dataclass
class LossWeights:
    """Blend coefficients; defaults are the working values for both stages."""

    transient_geo: float = 0.01
    silhouette: float = 0.1
    camera: float = 0.01
    transient_render: float = 1.0
    normal: float = 5.0
    smooth: float = 0.5
    specular: float = 0.1
    gamma: float = 5.0
    light: float = 5.0
    light_floor: float = 0.01

    def __post_init__(self):
        for name, val in self.__dict__.items():
            if val < 0:
                raise ValueError(f"loss weight {name} must be nonnegative, got {val}")


def _wrap(x):
    return x if isinstance(x, ad.DiffValue) else ad.constant(np.asarray(x, dtype=np.float64))


def color_nll(pred, target, beta, beta_min=0.03):
    """Uncertainty-weighted color loss: ||C - I||^2 / (2 b^2) + log(b^2) / 2.

    `pred` (B, 3) and `beta` (B,) live in the graph; `target` (B, 3) is data.
    The log term can go negative; boundedness relies on the beta floor, so a
    beta below `beta_min` is a contract violation, not a numeric fixup.
    """
    pred = _wrap(pred)
    beta = _wrap(beta)
    bval = np.asarray(beta.value)
    if bval.min() < beta_min - 1e-9:
        raise ValueError(f"beta {bval.min():.4g} below floor {beta_min}")
    target = np.asarray(target, dtype=np.float64)
    sq = ad.vsum(ad.square(pred - ad.constant(target)), axis=-1)
    b2 = ad.square(beta)
    per_ray = sq / (b2 * 2.0) + ad.log(b2) * 0.5
    return ad.vmean(per_ray)


def transient_mean(sigma_t):
    """Transient density regularizer: plain mean over every sample point."""
    return ad.vmean(_wrap(sigma_t))


def silhouette_bce(alpha, mask, eps=BCE_EPS):
    """Binary cross entropy between ray opacity and the foreground mask.

    alpha in [0, 1] from compositing; mask entries in {0, 1}.  Clamping keeps
    the logs finite when opacity saturates.
    """
    alpha = _wrap(alpha)
    mask = np.asarray(mask, dtype=np.float64)
    a = ad.minimum_const(ad.maximum_const(alpha, eps), 1.0 - eps)
    pos = ad.log(a) * ad.constant(mask)
    neg = ad.log(1.0 - a) * ad.constant(1.0 - mask)
    return -ad.vmean(pos + neg)


def camera_l2(rot, trans, focal):
    """Mean over images of |dR|^2 + |dt|^2 + df^2 on the refinement deltas."""
    rot = _wrap(rot)
    trans = _wrap(trans)
    focal = _wrap(focal)
    per_image = (
        ad.vsum(ad.square(rot), axis=-1)
        + ad.vsum(ad.square(trans), axis=-1)
        + ad.square(focal)
    )
    return ad.vmean(per_image)


def normal_supervision(pred_unit, grid_normals):
    """Confidence-weighted normal supervision.

    The grid normal's length is its confidence c in [0, 1]; the target term is
    ||c * n_pred - n_grid||^2, so zero-confidence cells contribute nothing and
    full-confidence cells pull n_pred onto the grid direction.  `grid_normals`
    is data (the grid is frozen during shading optimization).
    """
    pred_unit = _wrap(pred_unit)
    g = np.asarray(grid_normals, dtype=np.float64)
    conf = np.linalg.norm(g, axis=-1, keepdims=True)
    diff = pred_unit * ad.constant(conf) - ad.constant(g)
    return ad.vmean(ad.vsum(ad.square(diff), axis=-1))


def normal_smoothness(normals_a, normals_b):
    """Mean squared difference between normals at a point and a jittered twin."""
    a = _wrap(normals_a)
    b = _wrap(normals_b)
    return ad.vmean(ad.vsum(ad.square(a - b), axis=-1))


def regularity(k_s, gammas, lights, dirs, weights=None):
    """Keeps the shading model in its physical regime.

    Three terms: mean squared specular albedo (discourages explaining texture
    with highlights), mean squared deviation of per-image gamma from the sRGB
    anchor, and a hinge on negative environment radiance evaluated at `dirs`
    (the learned light may dip below zero between constraint points; radiance
    below -light_floor is penalized quadratically, channel mean).

    `lights` is (n, 16, 3) in the graph, `dirs` (t, 3) unit data vectors.
    """
    w = weights if weights is not None else LossWeights()
    from .shading import sh_basis

    k_s = _wrap(k_s)
    gammas = _wrap(gammas)
    lights = _wrap(lights)
    spec_term = ad.vmean(ad.square(k_s))
    gamma_term = ad.vmean(ad.square(gammas - GAMMA_ANCHOR))

    dirs = np.asarray(dirs, dtype=np.float64)
    basis = ad.constant(sh_basis(dirs))            # (t, 16)
    n_img = lights.value.shape[0]
    radiance = [ad.matmul(basis, lights[k]) for k in range(n_img)]
    rad = ad.concat(radiance, axis=0)              # (n*t, 3)
    hinge = ad.relu(-rad - w.light_floor)
    light_term = ad.vmean(ad.square(hinge))

    return spec_term * w.specular + gamma_term * w.gamma + light_term * w.light


def total_geometry(color, transient, silhouette, camera, weights=None):
    """Stage-1 objective: color + weighted transient, silhouette, camera terms."""
    w = weights if weights is not None else LossWeights()
    return (
        _wrap(color)
        + _wrap(transient) * w.transient_geo
        + _wrap(silhouette) * w.silhouette
        + _wrap(camera) * w.camera
    )


def total_rendering(color, transient, normal, smooth, reg, weights=None):
    """Stage-2 objective; `reg` already carries its internal coefficients."""
    w = weights if weights is not None else LossWeights()
    return (
        _wrap(color)
        + _wrap(transient) * w.transient_render
        + _wrap(normal) * w.normal
        + _wrap(smooth) * w.smooth
        + _wrap(reg)
    )
