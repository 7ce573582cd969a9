"""Loss-term checks: closed forms, a grid-search oracle for the uncertainty
weighting, and finite-difference gradients through every term."""

import numpy as np
import pytest

from objcap import autodiff as ad
from objcap import losses as ls
from objcap.shading import sh_basis

from helpers import check_grad

RNG = lambda seed=0: np.random.default_rng(seed)


# ---------------------------------------------------------------- weights


def test_default_weights():
    w = ls.LossWeights()
    assert (w.transient_geo, w.silhouette, w.camera) == (0.01, 0.1, 0.01)
    assert (w.transient_render, w.normal, w.smooth) == (1.0, 5.0, 0.5)
    assert (w.specular, w.gamma, w.light) == (0.1, 5.0, 5.0)
    assert w.light_floor == 0.01


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        ls.LossWeights(smooth=-0.5)


# ---------------------------------------------------------------- color


def test_color_zero_residual_unit_beta():
    c = np.full((4, 3), 0.25)
    out = ls.color_nll(c, c, np.ones(4))
    assert out.value == pytest.approx(0.0, abs=1e-12)


def test_color_unit_residual_closed_form():
    # squared residual 1 per ray, beta 1: 1/2 + 0 = 0.5
    pred = np.zeros((3, 3))
    target = np.zeros((3, 3))
    target[:, 0] = 1.0
    out = ls.color_nll(pred, target, np.ones(3))
    assert out.value == pytest.approx(0.5, abs=1e-12)


def test_color_beta_floor_enforced():
    c = np.zeros((2, 3))
    with pytest.raises(ValueError):
        ls.color_nll(c, c, np.full(2, 0.005))


def test_color_beta_minimum_matches_grid_search():
    # analytic argmin over beta is the residual norm; a dense grid agrees
    rng = RNG(3)
    pred = ad.constant(rng.uniform(0, 1, (1, 3)))
    target = rng.uniform(0, 1, (1, 3))
    resid = float(np.linalg.norm(pred.value - target))
    betas = np.linspace(0.03, 3.0, 4000)
    vals = [ls.color_nll(pred, target, np.array([b])).value for b in betas]
    best = betas[int(np.argmin(vals))]
    assert best == pytest.approx(resid, abs=1e-3)


def test_color_gradient_fd():
    rng = RNG(4)
    target = rng.uniform(0, 1, (5, 3))
    x0 = rng.uniform(0.2, 0.8, (5, 3))

    def build(x):
        return ls.color_nll(x, target, ad.constant(np.full(5, 0.7)))

    check_grad(build, x0, rtol=1e-5)

    b0 = rng.uniform(0.2, 1.5, (5,))

    def build_b(b):
        return ls.color_nll(ad.constant(x0), target, b, beta_min=0.01)

    check_grad(build_b, b0, rtol=1e-5)


# ---------------------------------------------------------------- transient


def test_transient_zero_and_constant():
    assert ls.transient_mean(np.zeros((4, 8))).value == 0.0
    assert ls.transient_mean(np.full((4, 8), 2.0)).value == pytest.approx(2.0)


def test_transient_matches_direct_mean():
    rng = RNG(5)
    x = rng.uniform(0, 3, (6, 11))
    assert ls.transient_mean(x).value == pytest.approx(x.mean(), rel=1e-12)


# ---------------------------------------------------------------- silhouette


def test_bce_match_is_small():
    a = np.array([1e-6, 1.0 - 1e-6])
    f = np.array([0.0, 1.0])
    assert ls.silhouette_bce(a, f).value < 2e-5


def test_bce_half_is_ln2():
    out = ls.silhouette_bce(np.array([0.5]), np.array([1.0]))
    assert out.value == pytest.approx(np.log(2.0), rel=1e-12)


def test_bce_confident_wrong_is_large_but_finite():
    out = ls.silhouette_bce(np.array([0.0]), np.array([1.0]))
    assert np.isfinite(out.value)
    assert out.value == pytest.approx(-np.log(ls.BCE_EPS), rel=1e-6)


def test_bce_minimized_at_match():
    # strict convexity in alpha: any perturbation away from the mask is worse
    f = np.array([0.0, 1.0, 1.0, 0.0])
    base = ls.silhouette_bce(f.copy(), f).value
    rng = RNG(6)
    for _ in range(20):
        a = np.clip(f + rng.uniform(-0.3, 0.3, 4), 0.0, 1.0)
        if np.allclose(a, f):
            continue
        assert ls.silhouette_bce(a, f).value > base


def test_bce_gradient_fd():
    rng = RNG(7)
    f = (rng.uniform(0, 1, 8) > 0.5).astype(np.float64)
    a0 = rng.uniform(0.1, 0.9, 8)
    check_grad(lambda a: ls.silhouette_bce(a, f), a0, rtol=1e-5)


# ---------------------------------------------------------------- camera


def test_camera_zero():
    z = np.zeros((3, 3))
    assert ls.camera_l2(z, z, np.zeros(3)).value == 0.0


def test_camera_single_translation():
    rot = np.zeros((1, 3))
    trans = np.array([[1.0, 0.0, 0.0]])
    assert ls.camera_l2(rot, trans, np.zeros(1)).value == pytest.approx(1.0)


def test_camera_matches_direct():
    rng = RNG(8)
    rot = rng.normal(size=(5, 3))
    trans = rng.normal(size=(5, 3))
    foc = rng.normal(size=5)
    want = np.mean((rot**2).sum(-1) + (trans**2).sum(-1) + foc**2)
    assert ls.camera_l2(rot, trans, foc).value == pytest.approx(want, rel=1e-12)


def test_camera_gradient_fd():
    rng = RNG(9)
    rot = rng.normal(size=(4, 3))
    trans = rng.normal(size=(4, 3))
    check_grad(lambda r: ls.camera_l2(r, trans, np.zeros(4)), rot, rtol=1e-6)


# ---------------------------------------------------------------- normals


def test_normal_zero_confidence_free():
    rng = RNG(10)
    n = rng.normal(size=(6, 3))
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    out = ls.normal_supervision(n, np.zeros((6, 3)))
    assert out.value == 0.0


def test_normal_agreement_and_flip():
    u = np.array([[0.0, 0.0, 1.0]])
    assert ls.normal_supervision(u, u).value == pytest.approx(0.0, abs=1e-12)
    assert ls.normal_supervision(u, 0.5 * u).value == pytest.approx(0.0, abs=1e-12)
    assert ls.normal_supervision(-u, 0.5 * u).value == pytest.approx(1.0, rel=1e-12)


def test_normal_gradient_fd():
    rng = RNG(11)
    g = rng.normal(size=(5, 3)) * 0.5
    x0 = rng.normal(size=(5, 3))

    def build(x):
        return ls.normal_supervision(ad.normalize_last(x), g)

    check_grad(build, x0, rtol=1e-4)


def test_smooth_constant_field_and_identity():
    n = np.tile([[0.0, 0.0, 1.0]], (7, 1))
    assert ls.normal_smoothness(n, n).value == 0.0


def test_smooth_quadratic_in_offset():
    # linear normal variation: doubling the jitter quadruples the loss
    rng = RNG(12)
    base = rng.normal(size=(50, 3))
    d = rng.normal(size=(50, 3))
    l1 = ls.normal_smoothness(base, base + 0.01 * d).value
    l2 = ls.normal_smoothness(base, base + 0.02 * d).value
    assert l2 == pytest.approx(4.0 * l1, rel=1e-9)


def test_smooth_gradient_fd():
    rng = RNG(13)
    a0 = rng.normal(size=(4, 3))
    b = rng.normal(size=(4, 3))
    check_grad(lambda a: ls.normal_smoothness(a, b), a0, rtol=1e-6)


# ---------------------------------------------------------------- regularity


def test_regularity_all_terms_zero():
    lights = np.zeros((2, 16, 3))
    lights[:, 0, :] = 1.0  # constant positive radiance
    dirs = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
    out = ls.regularity(np.zeros((5, 1)), np.full(2, 2.4), lights, dirs)
    assert out.value == pytest.approx(0.0, abs=1e-12)


def test_regularity_gamma_term():
    lights = np.zeros((1, 16, 3))
    lights[0, 0] = 1.0
    dirs = np.array([[0.0, 0.0, 1.0]])
    out = ls.regularity(np.zeros((1, 1)), np.array([3.4]), lights, dirs)
    assert out.value == pytest.approx(5.0, rel=1e-9)


def test_regularity_light_hinge_arithmetic():
    # constant radiance -0.02 with floor 0.01: hinge is 0.01 per channel
    c00 = sh_basis(np.array([[0.0, 0.0, 1.0]]))[0, 0]
    lights = np.zeros((1, 16, 3))
    lights[0, 0] = -0.02 / c00
    dirs = np.array([[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
    out = ls.regularity(np.zeros((1, 1)), np.array([2.4]), lights, dirs)
    assert out.value == pytest.approx(5.0 * 0.01**2, rel=1e-9)


def test_regularity_specular_term():
    lights = np.zeros((1, 16, 3))
    lights[0, 0] = 1.0
    dirs = np.array([[0.0, 0.0, 1.0]])
    ks = np.full((4, 1), 0.5)
    out = ls.regularity(ks, np.array([2.4]), lights, dirs)
    assert out.value == pytest.approx(0.1 * 0.25, rel=1e-9)


def test_regularity_gradient_fd():
    rng = RNG(14)
    dirs = rng.normal(size=(6, 3))
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    l0 = rng.normal(size=(2, 16, 3)) * 0.1

    def build(lights):
        return ls.regularity(
            ad.constant(np.full((3, 1), 0.2)),
            ad.constant(np.array([2.0, 2.6])),
            lights,
            dirs,
        )

    check_grad(build, l0, rtol=1e-4)


# ---------------------------------------------------------------- totals


def test_totals_zero():
    z = ad.constant(0.0)
    assert ls.total_geometry(z, z, z, z).value == 0.0
    assert ls.total_rendering(z, z, z, z, z).value == 0.0


def test_totals_unit_components():
    one = ad.constant(1.0)
    zero = ad.constant(0.0)
    geo = ls.total_geometry(one, one, one, one)
    assert geo.value == pytest.approx(1.12, rel=1e-12)
    ren = ls.total_rendering(one, one, one, one, zero)
    assert ren.value == pytest.approx(7.5, rel=1e-12)


def test_total_backward_reaches_all_inputs():
    rng = RNG(15)
    parts = [ad.leaf(rng.uniform(0.1, 1.0)) for _ in range(4)]
    total = ls.total_geometry(*parts)
    ad.backward(total)
    grads = [p.grad for p in parts]
    assert grads[0] == pytest.approx(1.0)
    assert grads[1] == pytest.approx(0.01)
    assert grads[2] == pytest.approx(0.1)
    assert grads[3] == pytest.approx(0.01)
