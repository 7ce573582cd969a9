"""Neural fields: positional encoding, MLP trunks and heads, per-image
embeddings.

The geometry stage owns the trunk (encoded position -> feature), a static
density head, a single-layer static color head fed with the encoded view
direction and a per-image appearance embedding, and a transient branch
(feature + per-image transient embedding -> transient density, color,
uncertainty). The rendering stage reuses the trunk and density head as
frozen constants and adds a material branch (position + feature -> normal,
diffuse albedo, white specular weight, glossiness).
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .optim import ParamStore
from .shading import SH_DC


@dataclass
class FieldConfig:
    pos_freqs: int = 10
    dir_freqs: int = 4
    trunk_depth: int = 8
    trunk_width: int = 256
    transient_depth: int = 4
    transient_width: int = 128
    material_depth: int = 4
    material_width: int = 128
    app_dim: int = 32
    transient_dim: int = 16
    beta_floor: float = 0.03
    density_bias: float = 0.0   # added to the raw density pre-activation
    density_scale: float = 1.0  # multiplies the softplus density output
    # transient density starts quiet so the static field wins the early
    # race to explain the images; the per-image branch would otherwise
    # absorb everything at the cost of only the small transient penalty
    transient_density_bias: float = -3.0
    transient_sigma_scale: float = 1.0  # init scale of the sigma head weights
    gamma_init: float = 2.4

    @classmethod
    def desk(cls) -> "FieldConfig":
        """Small preset for CPU-scale scenes.

        The transient branch starts deeply quiet (strong negative bias,
        tiny sigma-head weights): at desk step counts it would otherwise
        win the early race against the static field and absorb the scene.
        """
        return cls(pos_freqs=7, dir_freqs=2, trunk_depth=4, trunk_width=64,
                   transient_depth=2, transient_width=32,
                   material_depth=2, material_width=64,
                   transient_density_bias=-6.0, transient_sigma_scale=0.1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FieldConfig":
        return cls(**d)


def encode(x, num_freqs: int):
    """Positional encoding: [x, sin(2^j pi x), cos(2^j pi x)] for j < num_freqs.

    Works on ndarrays and graph nodes; output dim = d * (1 + 2 * num_freqs).
    """
    if isinstance(x, ad.DiffValue):
        parts = [x]
        for j in range(num_freqs):
            s = (2.0 ** j) * np.pi
            parts.append(ad.sin(x * s))
            parts.append(ad.cos(x * s))
        return ad.concat(parts, axis=-1)
    x = np.asarray(x, dtype=np.float64)
    parts = [x]
    for j in range(num_freqs):
        s = (2.0 ** j) * np.pi
        parts.append(np.sin(x * s))
        parts.append(np.cos(x * s))
    return np.concatenate(parts, axis=-1)


def encoded_dim(d: int, num_freqs: int) -> int:
    return d * (1 + 2 * num_freqs)


def init_linear(store: ParamStore, name: str, fan_in: int, fan_out: int,
                rng: np.random.Generator, bias: float = 0.0,
                weight_scale: float = 1.0):
    """Kaiming-uniform weights, constant bias."""
    bound = weight_scale * np.sqrt(6.0 / fan_in)
    store.add(f"{name}/w", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    store.add(f"{name}/b", np.full(fan_out, bias))


def linear(store: ParamStore, name: str, x: ad.DiffValue) -> ad.DiffValue:
    return ad.matmul(x, store[f"{name}/w"]) + store[f"{name}/b"]


def mlp(store: ParamStore, name: str, depth: int, x: ad.DiffValue) -> ad.DiffValue:
    """ReLU MLP of `depth` hidden layers named {name}/l{i}."""
    h = x
    for i in range(depth):
        h = ad.relu(linear(store, f"{name}/l{i}", h))
    return h


def init_mlp(store: ParamStore, name: str, dims: list[int],
             rng: np.random.Generator) -> None:
    for i in range(len(dims) - 1):
        init_linear(store, f"{name}/l{i}", dims[i], dims[i + 1], rng)


class GeometryField:
    """Stage-1 networks. All parameters live in the given store."""

    def __init__(self, store: ParamStore, config: FieldConfig, n_images: int,
                 rng: np.random.Generator | None = None, init: bool = True):
        self.store = store
        self.config = config
        self.n_images = n_images
        if init:
            if rng is None:
                raise ValueError("rng required to initialize parameters")
            c = config
            pe = encoded_dim(3, c.pos_freqs)
            de = encoded_dim(3, c.dir_freqs)
            init_mlp(store, "trunk", [pe] + [c.trunk_width] * c.trunk_depth, rng)
            init_linear(store, "sigma_head", c.trunk_width, 1, rng,
                        bias=c.density_bias)
            init_linear(store, "color_head",
                        c.trunk_width + de + c.app_dim, 3, rng)
            init_mlp(store, "transient",
                     [c.trunk_width + c.transient_dim]
                     + [c.transient_width] * c.transient_depth, rng)
            init_linear(store, "transient_sigma", c.transient_width, 1, rng,
                        bias=c.transient_density_bias,
                        weight_scale=c.transient_sigma_scale)
            init_linear(store, "transient_color", c.transient_width, 3, rng)
            init_linear(store, "transient_beta", c.transient_width, 1, rng)
            store.add("embed/app", rng.normal(0.0, 0.01, size=(n_images, c.app_dim)))
            store.add("embed/transient",
                      rng.normal(0.0, 0.01, size=(n_images, c.transient_dim)))

    def trunk_features(self, x: ad.DiffValue) -> ad.DiffValue:
        enc = encode(x, self.config.pos_freqs)
        return mlp(self.store, "trunk", self.config.trunk_depth, enc)

    def static_density(self, feat: ad.DiffValue) -> ad.DiffValue:
        raw = ad.softplus(linear(self.store, "sigma_head", feat))
        if self.config.density_scale != 1.0:
            raw = raw * ad.constant(self.config.density_scale)
        return raw

    def static_color(self, feat: ad.DiffValue, view: ad.DiffValue,
                     img_idx: np.ndarray) -> ad.DiffValue:
        enc_d = encode(view, self.config.dir_freqs)
        app = ad.take_rows(self.store["embed/app"], img_idx)
        h = ad.concat([feat, enc_d, app], axis=-1)
        return ad.sigmoid(linear(self.store, "color_head", h))

    def static_color_with_embedding(self, feat: ad.DiffValue, view: ad.DiffValue,
                                    app: ad.DiffValue) -> ad.DiffValue:
        """Same head with an explicit appearance row (test-time appearance
        fitting)."""
        enc_d = encode(view, self.config.dir_freqs)
        n = feat.shape[0]
        if app.shape[0] == 1 and n > 1:
            app = ad.take_rows(app, np.zeros(n, dtype=int))
        h = ad.concat([feat, enc_d, app], axis=-1)
        return ad.sigmoid(linear(self.store, "color_head", h))

    def transient(self, feat: ad.DiffValue, img_idx: np.ndarray):
        emb = ad.take_rows(self.store["embed/transient"], img_idx)
        h = mlp(self.store, "transient", self.config.transient_depth,
                ad.concat([feat, emb], axis=-1))
        sigma_t = ad.softplus(linear(self.store, "transient_sigma", h))
        color_t = ad.sigmoid(linear(self.store, "transient_color", h))
        beta = ad.softplus(linear(self.store, "transient_beta", h)) \
            + self.config.beta_floor
        return sigma_t, color_t, beta

    def density_np(self, x: np.ndarray, chunk: int = 65536) -> np.ndarray:
        """Plain-array density evaluation (grid filling, depth probes)."""
        x = np.asarray(x, dtype=np.float64)
        out = np.empty(x.shape[0])
        for i in range(0, x.shape[0], chunk):
            xs = ad.constant(x[i:i + chunk])
            out[i:i + chunk] = self.static_density(self.trunk_features(xs)).value[:, 0]
        return out


class RenderField:
    """Stage-2 networks on top of a frozen geometry checkpoint.

    Frozen trunk/density arrays are wrapped as constants in the forward, so
    no gradient work is spent on them. The material branch takes the raw
    position concatenated with the trunk feature.
    """

    def __init__(self, store: ParamStore, config: FieldConfig, n_images: int,
                 frozen: dict[str, np.ndarray],
                 rng: np.random.Generator | None = None, init: bool = True):
        self.store = store
        self.config = config
        self.n_images = n_images
        self.frozen = {k: np.asarray(v, dtype=np.float64) for k, v in frozen.items()}
        c = config
        needed = [f"trunk/l{i}/{p}" for i in range(c.trunk_depth) for p in "wb"]
        needed += ["sigma_head/w", "sigma_head/b"]
        for k in needed:
            if k not in self.frozen:
                raise KeyError(f"frozen geometry missing '{k}'")
        pe = encoded_dim(3, c.pos_freqs)
        if self.frozen["trunk/l0/w"].shape != (pe, c.trunk_width):
            raise ValueError("frozen trunk shape does not match the config")
        if init:
            if rng is None:
                raise ValueError("rng required to initialize parameters")
            init_mlp(store, "material",
                     [3 + c.trunk_width] + [c.material_width] * c.material_depth, rng)
            init_linear(store, "mat_normal", c.material_width, 3, rng)
            init_linear(store, "mat_kd", c.material_width, 3, rng)
            init_linear(store, "mat_ks", c.material_width, 1, rng, bias=-2.0)
            init_linear(store, "mat_gloss", c.material_width, 1, rng)
            init_mlp(store, "transient",
                     [c.trunk_width + c.transient_dim]
                     + [c.transient_width] * c.transient_depth, rng)
            init_linear(store, "transient_sigma", c.transient_width, 1, rng,
                        bias=c.transient_density_bias,
                        weight_scale=c.transient_sigma_scale)
            init_linear(store, "transient_color", c.transient_width, 3, rng)
            init_linear(store, "transient_beta", c.transient_width, 1, rng)
            store.add("embed/transient",
                      rng.normal(0.0, 0.01, size=(n_images, c.transient_dim)))
            # white environment of unit radiance: only the DC band set, so
            # the albedo heads start against a neutral, plausible light
            light = np.zeros((n_images, 16, 3))
            light[:, 0, :] = 1.0 / SH_DC
            store.add("light", light)
            store.add("gamma", np.full(n_images, c.gamma_init))

    def trunk_features(self, x: ad.DiffValue) -> ad.DiffValue:
        h = encode(x, self.config.pos_freqs)
        for i in range(self.config.trunk_depth):
            w = ad.constant(self.frozen[f"trunk/l{i}/w"])
            b = ad.constant(self.frozen[f"trunk/l{i}/b"])
            h = ad.relu(ad.matmul(h, w) + b)
        return h

    def static_density(self, feat: ad.DiffValue) -> ad.DiffValue:
        w = ad.constant(self.frozen["sigma_head/w"])
        b = ad.constant(self.frozen["sigma_head/b"])
        raw = ad.softplus(ad.matmul(feat, w) + b)
        if self.config.density_scale != 1.0:
            raw = raw * ad.constant(self.config.density_scale)
        return raw

    def density_np(self, x: np.ndarray, chunk: int = 65536) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = np.empty(x.shape[0])
        for i in range(0, x.shape[0], chunk):
            xs = ad.constant(x[i:i + chunk])
            out[i:i + chunk] = self.static_density(self.trunk_features(xs)).value[:, 0]
        return out

    def material(self, x: ad.DiffValue, feat: ad.DiffValue):
        h = mlp(self.store, "material", self.config.material_depth,
                ad.concat([x, feat], axis=-1))
        normal = ad.normalize_last(linear(self.store, "mat_normal", h))
        k_d = ad.sigmoid(linear(self.store, "mat_kd", h))
        k_s = ad.sigmoid(linear(self.store, "mat_ks", h))
        gloss = 1.0 + ad.softplus(linear(self.store, "mat_gloss", h))
        return normal, k_d, k_s, gloss

    def transient(self, feat: ad.DiffValue, img_idx: np.ndarray):
        emb = ad.take_rows(self.store["embed/transient"], img_idx)
        h = mlp(self.store, "transient", self.config.transient_depth,
                ad.concat([feat, emb], axis=-1))
        sigma_t = ad.softplus(linear(self.store, "transient_sigma", h))
        color_t = ad.sigmoid(linear(self.store, "transient_color", h))
        beta = ad.softplus(linear(self.store, "transient_beta", h)) \
            + self.config.beta_floor
        return sigma_t, color_t, beta
