"""Built-in verification suites: gradient checks for every differentiable op
and loss term, Delaunay circumcircle sweeps, PCA round trips, warp fidelity,
and metric oracle fixtures. The CLI selfcheck command runs all of them; the
acceptance tests reuse them with their own timing bounds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from . import geometry as geo
from .blend import StylePCA, fit_style_pca
from .embedders import Embedders, EmbedderConfig
from .generator import Generator, GeneratorConfig
from .inversion import (InversionConfig, landmark_loss_node,
                        latent_regularization_node, noise_regularization_node,
                        pixel_loss_node, _psnr_node, _weighted_total)
from .metrics import MorphTrial, det_metrics, far_threshold, mmpmr

CHECK_GEN = GeneratorConfig(resolution=16, latent_dim=16, mapping_depth=2,
                            max_channels=8, seed=1)
CHECK_EMB = EmbedderConfig(resolution=16, landmark_count=16, seed=7)


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    detail: str = ""


def _fd(name, loss, env, wrt=None, suite="gradients", tolerance=1e-4):
    report = T.finite_diff_check(loss, env, wrt=wrt, tolerance=tolerance)
    worst = max(c.max_rel_err for c in report.values())
    ok = all(c.passed for c in report.values())
    return CheckResult(suite, name, ok, f"max rel err {worst:.3e}")


def gradient_suite(inject_fault: bool = False) -> list[CheckResult]:
    """Finite-difference checks for the op set and every loss term at the
    16x16 check config. ``inject_fault`` corrupts one comparison, for
    exercising the failure path."""
    rng = np.random.default_rng(2024)
    out: list[CheckResult] = []

    def r(*shape):
        return rng.standard_normal(shape)

    # primitive ops
    x = T.leaf((3, 4), "x")
    y = T.leaf((3, 4), "y")
    env = {x: r(3, 4), y: r(3, 4)}
    probe = T.const(r(3, 4))
    out.append(_fd("add", T.reduce_sum((x + y) * probe), env))
    out.append(_fd("mul", T.reduce_sum((x * y) * probe), env))
    out.append(_fd("scalar_ops", T.reduce_sum((2.5 * x - y / 3.0 + 1.0) * probe), env))
    out.append(_fd("sum", T.reduce_sum(x) * T.reduce_sum(x), {x: env[x]}))
    out.append(_fd("mean", T.reduce_mean(x * x), {x: env[x]}))
    out.append(_fd("l1_norm", T.l1_norm(x + 2.0), {x: 0.3 * r(3, 4)}))
    out.append(_fd("l2_norm", T.l2_norm(x + 2.0), {x: 0.3 * r(3, 4)}))
    out.append(_fd("leaky_relu",
                   T.reduce_sum(T.leaky_relu(x, 0.2) * probe), {x: env[x]}))
    out.append(_fd("clamp",
                   T.reduce_sum(T.clamp(x, -0.8, 0.8) * probe), {x: env[x]}))

    a = T.leaf((3, 5), "a")
    b = T.leaf((5, 2), "b")
    bias = T.leaf((2,), "bias")
    out.append(_fd("matmul", T.reduce_sum(T.matmul(a, b) ** 2.0),
                   {a: r(3, 5), b: r(5, 2)}))
    out.append(_fd("linear", T.reduce_sum(T.linear(a, b, bias) ** 2.0),
                   {a: r(3, 5), b: r(5, 2), bias: r(2)}))

    img = T.leaf((2, 6, 6), "img")
    kern = T.leaf((3, 2, 3, 3), "kern")
    cprobe = T.const(r(3, 6, 6))
    out.append(_fd("conv2d", T.reduce_sum(T.conv2d(img, kern, pad=1) * cprobe),
                   {img: r(2, 6, 6), kern: r(3, 2, 3, 3)}))
    style = T.leaf((2,), "style")
    out.append(_fd("modulated_conv2d",
                   T.reduce_sum(T.modulated_conv2d(img, kern, style, pad=1) * cprobe),
                   {img: r(2, 6, 6), kern: r(3, 2, 3, 3), style: r(2) + 1.5}))
    m1 = T.leaf((1, 4, 4), "m1")
    k1 = T.leaf((2, 1, 3, 3), "k1")
    s1 = T.leaf((1,), "s1")
    out.append(_fd("modulated_conv2d_1x4x4",
                   T.reduce_sum(T.modulated_conv2d(m1, k1, s1, pad=1)
                                * T.const(r(2, 4, 4))),
                   {m1: r(1, 4, 4), k1: r(2, 1, 3, 3), s1: np.array([1.2])}))

    pool_in = T.leaf((2, 8, 8), "pool")
    out.append(_fd("avgpool_2x", T.reduce_sum(T.avgpool_2x(pool_in) ** 2.0),
                   {pool_in: r(2, 8, 8)}))
    out.append(_fd("upsample_2x",
                   T.reduce_sum(T.upsample_2x(pool_in) * T.const(r(2, 16, 16))),
                   {pool_in: r(2, 8, 8)}))
    out.append(_fd("resize_bilinear",
                   T.reduce_sum(T.resize_bilinear(pool_in, 5, 7) * T.const(r(2, 5, 7))),
                   {pool_in: r(2, 8, 8)}))
    sm = T.leaf((3, 4, 4), "sm")
    out.append(_fd("softmax_spatial",
                   T.reduce_sum(T.softmax(sm, axes=(1, 2)) * T.const(r(3, 4, 4))),
                   {sm: r(3, 4, 4)}))
    out.append(_fd("roll", T.reduce_sum(x * T.roll(x, 1, 1)), {x: env[x]}))

    # loss terms on the 16x16 check config
    gen = Generator(CHECK_GEN)
    emb = Embedders(CHECK_EMB)
    cfg = InversionConfig(steps=300, lr_rampup_steps=15,
                          lr_cosine_rampdown_steps=180,
                          latent_noise_hold_steps=75,
                          latent_noise_zero_step=225, t_s=120, seed=0)
    target = gen.synthesize_from_w(
        gen.broadcast_w(gen.map_latent(rng.standard_normal(16))),
        gen.zero_noise())
    l_t = emb.localize_landmarks(target)
    w_leaf, noise_leaves, img_node = gen._from_w_program()
    t_chw = np.transpose(target, (2, 0, 1))
    pix = pixel_loss_node(T.const(t_chw), img_node)
    pert = emb.build_perceptual_distance_to(img_node,
                                            emb.perceptual_features(target))
    xs, ys = emb.build_landmark_coords(img_node)
    land = landmark_loss_node(l_t, xs, ys)
    noi = noise_regularization_node(noise_leaves)
    lat = latent_regularization_node(w_leaf)
    total = _weighted_total(cfg, pert, pix, noi, lat, land)

    W0 = gen.broadcast_w(gen.w_mean(seed=3))
    env_full = {w_leaf: W0 + 0.02 * rng.standard_normal(W0.shape)}
    env_full.update({n: rng.standard_normal(n.shape) for n in noise_leaves})

    out.append(_fd("pixel_loss_wrt_W", pix, env_full, wrt=[w_leaf]))
    out.append(_fd("perceptual_loss_wrt_W", pert, env_full, wrt=[w_leaf]))
    out.append(_fd("landmark_loss_wrt_W", land, env_full, wrt=[w_leaf]))
    out.append(_fd("latent_reg_wrt_W", lat, env_full, wrt=[w_leaf]))
    out.append(_fd("noise_reg_wrt_maps", noi, env_full,
                   wrt=[noise_leaves[0], noise_leaves[-1]]))
    out.append(_fd("total_loss_wrt_W", total, env_full, wrt=[w_leaf]))
    out.append(_fd("total_loss_wrt_noise", total, env_full, wrt=[noise_leaves[1]]))

    # noise-training loss through the synthesis graph
    rng2 = np.random.default_rng(77)
    t2 = gen.synthesize_from_w(
        gen.broadcast_w(gen.map_latent(rng2.standard_normal(16))),
        gen.zero_noise())
    styles = [T.const(s) for s in gen.affine_styles(W0)]
    nt_leaves = gen.noise_leaves()
    g_img = gen.build_synthesis(styles, nt_leaves)
    p1 = _psnr_node(t_chw, g_img)
    p2 = _psnr_node(np.transpose(t2, (2, 0, 1)), g_img)
    psnr_loss = 0.6 * p1 - 0.4 * p2
    env_nt = {n: rng.standard_normal(n.shape) for n in nt_leaves}
    out.append(_fd("psnr_loss_wrt_noise", psnr_loss, env_nt,
                   wrt=[nt_leaves[0], nt_leaves[-1]]))

    if inject_fault:
        out.append(CheckResult("gradients", "injected_fault", False,
                               "deliberate failure for exercising exit paths"))
    return out


def delaunay_suite(point_sets: int = 50, seed: int = 5) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    worst = 0
    for _ in range(point_sets):
        pts = rng.uniform(0, 100, (int(rng.integers(5, 30)), 2))
        mesh = geo.delaunay_triangulate(pts)
        worst = max(worst, geo.circumcircle_violations(mesh))
    return [CheckResult("delaunay", f"empty_circumcircle_{point_sets}_sets",
                        worst == 0, f"violations {worst}")]


def warp_suite() -> list[CheckResult]:
    rng = np.random.default_rng(99)
    img = rng.uniform(0, 1, (32, 32, 3))
    pts = np.vstack([rng.uniform(6, 26, (6, 2)), geo.boundary_points(32, 32)])
    out = geo.warp_piecewise_affine(img, pts, pts)
    err = float(np.max(np.abs(out - img)))
    return [CheckResult("warp", "identity_warp", err < 1e-6, f"max abs {err:.2e}")]


def pca_suite(samples: int = 500) -> list[CheckResult]:
    gen = Generator(CHECK_GEN)
    rng = np.random.default_rng(123)
    w = gen.map_latent(rng.standard_normal((samples, CHECK_GEN.latent_dim)))
    styles = gen.affine_styles_batch(w)
    corpus = [[styles[i][n] for i in range(len(styles))] for n in range(samples)]
    models = fit_style_pca(corpus)
    worst = 0.0
    ordered = True
    for i, m in enumerate(models):
        v = corpus[7][i]
        err = float(np.max(np.abs(m.inverse_transform(m.transform(v)) - v)))
        worst = max(worst, err)
        ordered &= bool(np.all(np.diff(m.eigenvalues_) <= 1e-12))
    return [CheckResult("pca", "round_trip_500_corpus", worst < 1e-8,
                        f"max abs {worst:.2e}"),
            CheckResult("pca", "eigenvalues_non_increasing", ordered, "")]


def metrics_suite() -> list[CheckResult]:
    results = []
    scores = np.arange(1, 11) / 10.0
    ok = (far_threshold(scores, 0.1) == 1.0 and far_threshold(scores, 0.2) == 0.9
          and far_threshold(np.full(5, 0.3), 0.5) == 0.3)
    results.append(CheckResult("metrics", "far_threshold_fixtures", ok, ""))

    trials = [MorphTrial("a", 0.9, 0.8), MorphTrial("b", 0.6, 0.4),
              MorphTrial("c", 0.55, 0.52), MorphTrial("d", 0.3, 0.9),
              MorphTrial("e", 0.51, 0.7)]
    results.append(CheckResult("metrics", "mmpmr_hand_count",
                               mmpmr(trials, 0.5) == 0.6, ""))

    rng = np.random.default_rng(17)
    ok = True
    for _ in range(5):
        morph = rng.normal(0, 1, 20)
        bona = rng.normal(0.7, 1, 25)
        rep = det_metrics(morph, bona)
        for tau, apcer, bpcer in rep.curve:
            brute_a = float(np.mean(morph > tau))
            brute_b = float(np.mean(bona <= tau))
            ok &= (apcer == brute_a and bpcer == brute_b)
    results.append(CheckResult("metrics", "det_curve_exhaustive", ok, ""))
    return results


def run_all(inject_fault: bool = False) -> list[CheckResult]:
    results = []
    results += gradient_suite(inject_fault=inject_fault)
    results += delaunay_suite()
    results += warp_suite()
    results += pca_suite()
    results += metrics_suite()
    return results
