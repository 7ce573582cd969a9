"""Spherical-harmonics lighting and Phong-style shading.

Real SH basis up to l = 3 (graphics convention, no Condon-Shortley phase),
16 coefficients per color channel. Diffuse shading contracts the light
against the clamped-cosine band gains; the specular lobe reuses the light
coefficients with per-band Gaussian attenuation exp(-l^2 / 2g) evaluated
at the reflection direction. Both lobes clamp at zero.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

N_SH = 16
SH_ORDER = 3

# band gains for the clamped cosine, published rounded values
BAND_GAIN = np.array([3.14, 2.09, 0.79, 0.0])

# per-coefficient degree l and l^2
SH_DEGREE = np.array([0, 1, 1, 1, 2, 2, 2, 2, 2, 3, 3, 3, 3, 3, 3, 3])
_GAIN16 = BAND_GAIN[SH_DEGREE]
_LSQ16 = (SH_DEGREE ** 2).astype(np.float64)

# normalization constants, coefficient order (l, m): (0,0), (1,-1), (1,0),
# (1,1), (2,-2), (2,-1), (2,0), (2,1), (2,2), (3,-3) ... (3,3)
_C00 = 0.28209479177387814
SH_DC = _C00   # DC basis value; radiance of a constant light = SH_DC * coeff
_C1 = 0.4886025119029199
_C2A = 1.0925484305920792
_C20 = 0.31539156525252005
_C22 = 0.5462742152960396
_C3A = 0.5900435899266435
_C3B = 2.890611442640554
_C3C = 0.4570457994644658
_C30 = 0.3731763325901154
_C3D = 1.445305721320277


def sh_basis(dirs: np.ndarray) -> np.ndarray:
    """Evaluate the 16 basis functions at unit directions (..., 3)."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    out = np.empty(d.shape[:-1] + (N_SH,), dtype=np.float64)
    out[..., 0] = _C00
    out[..., 1] = _C1 * y
    out[..., 2] = _C1 * z
    out[..., 3] = _C1 * x
    out[..., 4] = _C2A * x * y
    out[..., 5] = _C2A * y * z
    out[..., 6] = _C20 * (3.0 * zz - 1.0)
    out[..., 7] = _C2A * x * z
    out[..., 8] = _C22 * (xx - yy)
    out[..., 9] = _C3A * y * (3.0 * xx - yy)
    out[..., 10] = _C3B * x * y * z
    out[..., 11] = _C3C * y * (5.0 * zz - 1.0)
    out[..., 12] = _C30 * z * (5.0 * zz - 3.0)
    out[..., 13] = _C3C * x * (5.0 * zz - 1.0)
    out[..., 14] = _C3D * z * (xx - yy)
    out[..., 15] = _C3A * x * (xx - 3.0 * yy)
    return out


def sh_basis_dv(n: ad.DiffValue) -> ad.DiffValue:
    """Same basis on graph nodes; n is (B, 3), output (B, 16)."""
    x, y, z = n[:, 0:1], n[:, 1:2], n[:, 2:3]
    xx, yy, zz = ad.square(x), ad.square(y), ad.square(z)
    cols = [
        ad.constant(np.full((n.shape[0], 1), _C00)),
        _C1 * y,
        _C1 * z,
        _C1 * x,
        _C2A * (x * y),
        _C2A * (y * z),
        _C20 * (3.0 * zz - 1.0),
        _C2A * (x * z),
        _C22 * (xx - yy),
        _C3A * (y * (3.0 * xx - yy)),
        _C3B * (x * y * z),
        _C3C * (y * (5.0 * zz - 1.0)),
        _C30 * (z * (5.0 * zz - 3.0)),
        _C3C * (x * (5.0 * zz - 1.0)),
        _C3D * (z * (xx - yy)),
        _C3A * (x * (xx - 3.0 * yy)),
    ]
    return ad.concat(cols, axis=-1)


def eval_sh(coeffs: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Reconstruct the environment at unit directions.

    coeffs (16, C), dirs (..., 3) -> (..., C).
    """
    return sh_basis(dirs) @ np.asarray(coeffs, dtype=np.float64)


def project_envmap(env, l_max: int = SH_ORDER, resolution=(64, 128)):
    """Project an environment onto SH coefficients by equirect quadrature.

    env is either a callable dirs (..., 3) -> (..., C) or an equirect image
    (H, W, C) with row 0 at the +z pole, column phase 0 at +x azimuth.
    Returns ((l_max+1)^2, C).
    """
    h, w = resolution
    theta = (np.arange(h) + 0.5) * np.pi / h
    phi = (np.arange(w) + 0.5) * 2.0 * np.pi / w
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    st = np.sin(tt)
    dirs = np.stack([st * np.cos(pp), st * np.sin(pp), np.cos(tt)], axis=-1)

    if callable(env):
        vals = np.asarray(env(dirs), dtype=np.float64)
    else:
        vals = _sample_equirect(np.asarray(env, dtype=np.float64), tt, pp)
    if vals.ndim == 2:
        vals = vals[..., None]

    basis = sh_basis(dirs)[..., :(l_max + 1) ** 2]
    d_omega = (np.pi / h) * (2.0 * np.pi / w) * st
    return np.einsum("hwk,hwc,hw->kc", basis, vals, d_omega)


def _sample_equirect(img: np.ndarray, theta: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Bilinear lookup; phi wraps, theta clamps at the poles."""
    h, w = img.shape[:2]
    fy = theta / np.pi * h - 0.5
    fx = phi / (2.0 * np.pi) * w - 0.5
    y0 = np.floor(fy).astype(int)
    x0 = np.floor(fx).astype(int)
    wy = (fy - y0)[..., None]
    wx = (fx - x0)[..., None]
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    x0m = np.mod(x0, w)
    x1m = np.mod(x0 + 1, w)
    top = img[y0c, x0m] * (1 - wx) + img[y0c, x1m] * wx
    bot = img[y1c, x0m] * (1 - wx) + img[y1c, x1m] * wx
    return top * (1 - wy) + bot * wy


# ---------------------------------------------------------------------------
# shading on graph nodes


def shade_lambert(light: ad.DiffValue, normal: ad.DiffValue,
                  k_d: ad.DiffValue) -> ad.DiffValue:
    """Diffuse radiance, clamped at zero.

    light (B, 16, 3) per-ray SH coefficients, normal (B, 3) unit,
    k_d (B, 3) albedo in [0, 1]. Bands l <= 2 carry the clamped cosine.
    """
    basis = sh_basis_dv(normal)                       # (B,16)
    weighted = basis * ad.constant(_GAIN16[None, :])  # zero past l=2
    irr = ad.vsum(ad.reshape(weighted, (-1, N_SH, 1)) * light, axis=1)  # (B,3)
    return ad.relu(k_d * irr * (1.0 / np.pi))


def reflect_dv(w_out: ad.DiffValue, normal: ad.DiffValue) -> ad.DiffValue:
    """Mirror of the outgoing direction about the normal."""
    d = ad.dot_last(w_out, normal)
    return 2.0 * d * normal - w_out


def shade_specular(light: ad.DiffValue, normal: ad.DiffValue,
                   w_out: ad.DiffValue, k_s: ad.DiffValue,
                   gloss: ad.DiffValue) -> ad.DiffValue:
    """Specular radiance: light filtered per band by exp(-l^2 / 2g) and
    evaluated at the reflection direction, scaled by the white K_s.

    w_out (B, 3) unit direction toward the viewer, k_s (B, 1), gloss (B, 1)
    with g >= 1. Clamped at zero.
    """
    w_r = reflect_dv(w_out, normal)
    basis = sh_basis_dv(w_r)                                      # (B,16)
    atten = ad.exp(ad.constant(-_LSQ16[None, :]) / (2.0 * gloss))  # (B,16)
    filt = basis * atten
    val = ad.vsum(ad.reshape(filt, (-1, N_SH, 1)) * light, axis=1)  # (B,3)
    return ad.relu(k_s * val)


def shade_point(light: ad.DiffValue, normal: ad.DiffValue, w_out: ad.DiffValue,
                k_d: ad.DiffValue, k_s: ad.DiffValue,
                gloss: ad.DiffValue) -> ad.DiffValue:
    return shade_lambert(light, normal, k_d) + shade_specular(light, normal,
                                                              w_out, k_s, gloss)


def blend_transient(c_static: ad.DiffValue, c_transient: ad.DiffValue,
                    sigma_t: ad.DiffValue) -> ad.DiffValue:
    """Lerp toward the shaded color as transient density vanishes:
    c = lerp(c_transient, c_static, exp(-sigma_t))."""
    t = ad.exp(ad.neg(sigma_t))
    return c_transient + (c_static - c_transient) * t


def tone_map(linear: ad.DiffValue, gamma: ad.DiffValue) -> ad.DiffValue:
    """Display encoding x -> x^(1/gamma), exact at 0 and 1.

    gamma (B, 1) broadcasts over the color channels; values are kept away
    from zero so the exponent stays finite.
    """
    q = 1.0 / ad.maximum_const(gamma, 1e-2)
    return ad.safe_pow(linear, q)


def tone_map_np(linear: np.ndarray, gamma: float) -> np.ndarray:
    return np.power(np.maximum(linear, 0.0), 1.0 / max(gamma, 1e-2))


# ---------------------------------------------------------------------------
# Monte-Carlo shading oracle


def mc_shade(env, normal, w_out, k_d, k_s, gloss, n_samples=20000,
             rng=None, chunk=100000):
    """Hemisphere Monte-Carlo estimate of the shaded radiance for one point.

    env: callable dirs (..., 3) -> (..., 3). Uniform hemisphere sampling
    about the normal; diffuse transport (k_d/pi) cos(n.w), specular
    transport k_s (g+1)/(2pi) max(0, w.w_r)^g with no extra cosine.
    Returns (rgb (3,), standard error (3,)).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    w_o = np.asarray(w_out, dtype=np.float64)
    w_o = w_o / np.linalg.norm(w_o)
    w_r = 2.0 * np.dot(w_o, n) * n - w_o
    k_d = np.asarray(k_d, dtype=np.float64) * np.ones(3)
    k_s = np.asarray(k_s, dtype=np.float64) * np.ones(3)

    # tangent frame
    helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    t1 = np.cross(n, helper)
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(n, t1)

    total = np.zeros(3)
    total_sq = np.zeros(3)
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        z = rng.uniform(0.0, 1.0, size=m)          # uniform in cos(theta)
        phi = rng.uniform(0.0, 2.0 * np.pi, size=m)
        r = np.sqrt(np.maximum(1.0 - z * z, 0.0))
        dirs = (np.outer(r * np.cos(phi), t1) + np.outer(r * np.sin(phi), t2)
                + np.outer(z, n))
        light = np.asarray(env(dirs), dtype=np.float64)
        cos_n = dirs @ n
        diff = (k_d / np.pi)[None, :] * cos_n[:, None]
        cos_r = np.maximum(dirs @ w_r, 0.0)
        spec = (k_s * (gloss + 1.0) / (2.0 * np.pi))[None, :] \
            * (cos_r ** gloss)[:, None]
        contrib = light * (diff + spec)
        total += contrib.sum(axis=0)
        total_sq += (contrib * contrib).sum(axis=0)
        done += m

    # pdf = 1 / 2pi on the hemisphere
    mean = total / n_samples
    var = total_sq / n_samples - mean * mean
    est = 2.0 * np.pi * mean
    stderr = 2.0 * np.pi * np.sqrt(np.maximum(var, 0.0) / n_samples)
    return est, stderr


# ---------------------------------------------------------------------------
# light file io


def save_sh_text(path, coeffs: np.ndarray) -> None:
    """48 numbers: coefficient-major (l-major, m ascending), RGB interleaved."""
    c = np.asarray(coeffs, dtype=np.float64).reshape(N_SH, 3)
    with open(path, "w") as f:
        for row in c:
            f.write(f"{row[0]:.17g} {row[1]:.17g} {row[2]:.17g}\n")


def load_sh_text(path) -> np.ndarray:
    vals = np.loadtxt(path, dtype=np.float64).reshape(-1)
    if vals.size != N_SH * 3:
        raise ValueError(f"expected {N_SH * 3} light coefficients, got {vals.size}")
    return vals.reshape(N_SH, 3)


def load_pfm(path) -> np.ndarray:
    """Minimal PFM reader (PF color / Pf gray, scanlines bottom-up when the
    scale is negative, which is the common little-endian case)."""
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header not in (b"PF", b"Pf"):
            raise ValueError("not a PFM file")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline())
        count = w * h * (3 if header == b"PF" else 1)
        data = np.fromfile(f, "<f4" if scale < 0 else ">f4", count)
    img = data.reshape(h, w, -1)
    return np.flipud(img).astype(np.float64)


def save_pfm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.float32)
    color = img.ndim == 3 and img.shape[2] == 3
    with open(path, "wb") as f:
        f.write(b"PF\n" if color else b"Pf\n")
        f.write(f"{img.shape[1]} {img.shape[0]}\n".encode())
        f.write(b"-1.0\n")
        np.flipud(img).astype("<f4").tofile(f)


def load_envmap(path) -> np.ndarray:
    """Equirect environment image as linear float (H, W, 3). PNG values are
    treated as display-encoded with gamma 2.2; PFM is linear as stored."""
    p = str(path)
    if p.lower().endswith(".pfm"):
        img = load_pfm(p)
        if img.shape[2] == 1:
            img = np.repeat(img, 3, axis=2)
        return img
    from PIL import Image
    arr = np.asarray(Image.open(p).convert("RGB"), dtype=np.float64) / 255.0
    return np.power(arr, 2.2)
