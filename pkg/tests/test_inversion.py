import math

import numpy as np
import pytest

import oracles
from conftest import TOY_EMB, TOY_GEN, toy_inversion_config
from stylemorph import tensor as T
from stylemorph import inversion as inv

RNG = np.random.default_rng(33)


def fast_config(**kw):
    base = dict(steps=60, lr_rampup_steps=5, lr_cosine_rampdown_steps=30,
                latent_noise_hold_steps=15, latent_noise_zero_step=45,
                t_s=20, seed=3)
    base.update(kw)
    return inv.InversionConfig(**base)


class TestPixelLoss:
    def test_zero_on_equal(self):
        t = RNG.uniform(0, 1, (8, 8, 3))
        assert inv.pixel_loss(t, t) == 0.0

    def test_constant_offset(self):
        t = RNG.uniform(0, 0.5, (8, 8, 3))
        assert inv.pixel_loss(t, t + 0.5) == pytest.approx(0.5, rel=1e-12)

    def test_matches_elementwise_oracle(self):
        t = RNG.uniform(0, 1, (6, 5, 3))
        g = RNG.uniform(0, 1, (6, 5, 3))
        brute = sum(abs(t[i, j, c] - g[i, j, c])
                    for i in range(6) for j in range(5) for c in range(3))
        assert inv.pixel_loss(t, g) == pytest.approx(brute / (6 * 5 * 3), rel=1e-12)


class TestLandmarkLoss:
    def test_zero_when_matching(self, toy_embedders):
        img = RNG.uniform(0, 1, (16, 16, 3))
        l_t = toy_embedders.localize_landmarks(img)
        assert inv.landmark_loss(l_t, img, toy_embedders) == pytest.approx(0.0, abs=1e-18)

    def test_single_offset_345(self):
        # one landmark displaced by (3,4) contributes 3^2 + 4^2 = 25
        xs = T.leaf((1,))
        ys = T.leaf((1,))
        node = inv.landmark_loss_node(np.array([[10.0, 10.0]]), xs, ys)
        val = T.evaluate(node, {xs: np.array([13.0]), ys: np.array([14.0])})
        assert float(val) == 25.0

    def test_matches_per_landmark_oracle(self, toy_embedders):
        img = RNG.uniform(0, 1, (16, 16, 3))
        l_t = RNG.uniform(0, 15, (16, 2))
        found = toy_embedders.localize_landmarks(img)
        brute = sum((l_t[k, 0] - found[k, 0]) ** 2 + (l_t[k, 1] - found[k, 1]) ** 2
                    for k in range(16))
        assert inv.landmark_loss(l_t, img, toy_embedders) == pytest.approx(brute, rel=1e-12)

    def test_count_mismatch(self, toy_embedders):
        with pytest.raises(inv.InversionError):
            inv.landmark_loss(np.zeros((5, 2)), RNG.uniform(0, 1, (16, 16, 3)),
                              toy_embedders)


class TestNoiseRegularization:
    def test_constant_map_closed_form(self):
        c = 0.7
        val = inv.noise_regularization([np.full((8, 8), c)])
        # autocorrelation of a constant is c^2; squared and doubled
        assert val == pytest.approx(2 * c ** 4, rel=1e-12)
        assert val == pytest.approx(oracles.noise_reg_pyramid(np.full((8, 8), c)),
                                    rel=1e-12)

    def test_single_spike_is_zero(self):
        m = np.zeros((8, 8))
        m[3, 5] = 1.0
        assert inv.noise_regularization([m]) == 0.0

    def test_random_map_matches_double_sum_oracle(self):
        for seed in range(5):
            m = np.random.default_rng(seed).standard_normal((16, 16))
            assert inv.noise_regularization([m]) == pytest.approx(
                oracles.noise_reg_pyramid(m), abs=1e-10)

    def test_multiple_maps_sum(self):
        maps = [RNG.standard_normal((4, 4)), RNG.standard_normal((8, 8)),
                RNG.standard_normal((16, 16))]
        total = inv.noise_regularization(maps)
        parts = sum(inv.noise_regularization([m]) for m in maps)
        assert total == pytest.approx(parts, rel=1e-12)


class TestLatentRegularization:
    def test_zeros(self):
        assert inv.latent_regularization(np.zeros((6, 16))) == 0.0

    def test_ones(self):
        assert inv.latent_regularization(np.ones((6, 16))) == 1.0

    def test_random_rms(self):
        W = RNG.standard_normal((6, 16))
        brute = math.sqrt(sum(x * x for x in W.ravel()) / W.size)
        assert inv.latent_regularization(W) == pytest.approx(brute, rel=1e-12)


class TestTotalLoss:
    def test_all_lambda_zero_is_perceptual(self, toy_generator, toy_embedders):
        cfg = fast_config(lambda_pix=0, lambda_noise=0, lambda_lat=0,
                          lambda_land=0)
        t = RNG.uniform(0, 1, (16, 16, 3))
        g = RNG.uniform(0, 1, (16, 16, 3))
        l_t = toy_embedders.localize_landmarks(g)
        total, terms = inv.total_loss(t, g, l_t, np.ones((6, 16)),
                                      toy_generator.zero_noise(),
                                      toy_embedders, cfg)
        assert total == terms["loss_pert"]
        assert total == toy_embedders.perceptual_distance(t, g)

    def test_perfect_reconstruction_is_zero(self, toy_generator, toy_embedders):
        cfg = fast_config()
        t = RNG.uniform(0, 1, (16, 16, 3))
        l_t = toy_embedders.localize_landmarks(t)
        zeroW = np.zeros((TOY_GEN.num_latent_layers, TOY_GEN.latent_dim))
        total, _ = inv.total_loss(t, t, l_t, zeroW, toy_generator.zero_noise(),
                                  toy_embedders, cfg)
        assert total == pytest.approx(0.0, abs=1e-15)

    def test_recomposition_oracle(self, toy_generator, toy_embedders):
        cfg = fast_config()
        t = RNG.uniform(0, 1, (16, 16, 3))
        g = RNG.uniform(0, 1, (16, 16, 3))
        l_t = RNG.uniform(0, 15, (16, 2))
        W = RNG.standard_normal((6, 16))
        noise = [RNG.standard_normal(m.shape) for m in toy_generator.zero_noise()]
        total, terms = inv.total_loss(t, g, l_t, W, noise, toy_embedders, cfg)
        recomposed = terms["loss_pert"] + terms["loss_pix"] * cfg.lambda_pix
        recomposed = recomposed + terms["loss_noise"] * cfg.lambda_noise
        recomposed = recomposed + terms["loss_lat"] * cfg.lambda_lat
        recomposed = recomposed + terms["loss_land"] * cfg.lambda_land
        assert total == recomposed  # bit-exact: same order, same ops


class TestPsnr:
    def test_identical_gives_sentinel(self):
        a = RNG.uniform(0, 1, (8, 8, 3))
        assert inv.psnr(a, a) == inv.PSNR_MAX

    def test_uniform_full_scale_diff_is_zero_db(self):
        assert inv.psnr(np.zeros((4, 4, 3)), np.ones((4, 4, 3))) == 0.0

    def test_matches_mse_formula(self):
        a = RNG.uniform(0, 1, (8, 8, 3))
        b = RNG.uniform(0, 1, (8, 8, 3))
        mse8 = np.mean((255 * a - 255 * b) ** 2)
        expect = 20 * math.log10(255 / math.sqrt(mse8))
        assert inv.psnr(a, b) == pytest.approx(expect, rel=1e-12)


class TestSchedules:
    def test_lr_endpoints_and_monotone_tail(self):
        cfg = inv.InversionConfig()  # paper defaults: 1000 steps
        assert inv.learning_rate(cfg, 0) == 0.0
        assert inv.learning_rate(cfg, 50) == cfg.lr_peak
        assert inv.learning_rate(cfg, cfg.steps - 1) < 1e-3 * cfg.lr_peak
        tail = [inv.learning_rate(cfg, s) for s in range(400, 1000)]
        assert all(a >= b for a, b in zip(tail, tail[1:]))

    def test_plateau_between_rampup_and_rampdown(self):
        cfg = inv.InversionConfig()
        assert inv.learning_rate(cfg, 200) == cfg.lr_peak
        assert inv.learning_rate(cfg, 399) == cfg.lr_peak

    def test_sigma_hold_then_decay(self):
        cfg = inv.InversionConfig()
        s0 = 0.04
        assert inv.exploration_sigma(cfg, 0, s0) == s0
        assert inv.exploration_sigma(cfg, 249, s0) == s0
        mid = inv.exploration_sigma(cfg, 500, s0)
        assert 0 < mid < s0
        assert inv.exploration_sigma(cfg, 750, s0) == 0.0
        assert inv.exploration_sigma(cfg, 900, s0) == 0.0

    def test_config_validation(self):
        with pytest.raises(inv.InversionError):
            inv.InversionConfig(t_s=1000)
        with pytest.raises(inv.InversionError):
            inv.InversionConfig(steps=100, lr_rampup_steps=60,
                                lr_cosine_rampdown_steps=60, t_s=50)
        with pytest.raises(inv.InversionError):
            inv.InversionConfig(lambda_pix=-1.0)


class TestInvert:
    def test_structure_and_t_s_contract(self, toy_generator, toy_embedders):
        cfg = fast_config()
        rng = np.random.default_rng(4)
        W0 = toy_generator.broadcast_w(
            toy_generator.map_latent(rng.standard_normal(16)))
        target = toy_generator.synthesize_from_w(W0, toy_generator.zero_noise())
        l_t = toy_embedders.localize_landmarks(target)
        res = inv.invert(target, l_t, toy_generator, toy_embedders, cfg)
        assert len(res.trace) == cfg.steps
        for m in res.noise:
            assert np.all(m == 0.0)
        for row in res.trace:
            if row["step"] < cfg.t_s:
                assert row["noise_rms"] > 0.0
            else:
                assert row["noise_rms"] == 0.0
        assert res.trace[-1]["loss_total"] < res.trace[0]["loss_total"]

    def test_trace_recomposition_every_step(self, toy_generator, toy_embedders):
        cfg = fast_config(steps=30, lr_rampup_steps=3, lr_cosine_rampdown_steps=20,
                          latent_noise_hold_steps=5, latent_noise_zero_step=20,
                          t_s=10)
        rng = np.random.default_rng(5)
        target = toy_generator.synthesize_from_w(
            toy_generator.broadcast_w(
                toy_generator.map_latent(rng.standard_normal(16))),
            toy_generator.zero_noise())
        l_t = toy_embedders.localize_landmarks(target)
        res = inv.invert(target, l_t, toy_generator, toy_embedders, cfg)
        for row in res.trace:
            total = row["loss_pert"] + row["loss_pix"] * cfg.lambda_pix
            total = total + row["loss_noise"] * cfg.lambda_noise
            total = total + row["loss_lat"] * cfg.lambda_lat
            total = total + row["loss_land"] * cfg.lambda_land
            assert row["loss_total"] == total

    def test_deterministic_given_seed(self, toy_generator, toy_embedders):
        cfg = fast_config(steps=40, lr_rampup_steps=4, lr_cosine_rampdown_steps=20,
                          latent_noise_hold_steps=10, latent_noise_zero_step=30,
                          t_s=15)
        rng = np.random.default_rng(6)
        target = toy_generator.synthesize_from_w(
            toy_generator.broadcast_w(
                toy_generator.map_latent(rng.standard_normal(16))),
            toy_generator.zero_noise())
        l_t = toy_embedders.localize_landmarks(target)
        a = inv.invert(target, l_t, toy_generator, toy_embedders, cfg)
        b = inv.invert(target, l_t, toy_generator, toy_embedders, cfg)
        assert a.W.tobytes() == b.W.tobytes()
        assert a.trace == b.trace

    def test_input_validation(self, toy_generator, toy_embedders):
        cfg = fast_config()
        with pytest.raises(inv.InversionError):
            inv.invert(np.zeros((8, 8, 3)), np.zeros((16, 2)),
                       toy_generator, toy_embedders, cfg)
        with pytest.raises(inv.InversionError):
            inv.invert(np.zeros((16, 16, 3)), np.zeros((5, 2)),
                       toy_generator, toy_embedders, cfg)


@pytest.fixture(scope="module")
def pair(toy_generator):
    g = toy_generator
    rng = np.random.default_rng(8)
    t1 = g.synthesize_from_w(g.broadcast_w(g.map_latent(rng.standard_normal(16))),
                             g.zero_noise())
    t2 = g.synthesize_from_w(g.broadcast_w(g.map_latent(rng.standard_normal(16))),
                             g.zero_noise())
    Wa = g.broadcast_w(g.map_latent(rng.standard_normal(16)))
    Wb = g.broadcast_w(g.map_latent(rng.standard_normal(16)))
    from stylemorph.blend import average_latents
    return average_latents(Wa, Wb), t1, t2


class TestNoiseTrain:
    def test_unit_rms_and_lambda_partition(self, pair, toy_generator, toy_embedders):
        Wm, t1, t2 = pair
        res = inv.noise_train(Wm, t1, t2, toy_generator, toy_embedders, steps=25)
        assert len(res.trace) == 25
        for row in res.trace:
            assert row["min_rms"] == pytest.approx(1.0, abs=1e-6)
            assert row["max_rms"] == pytest.approx(1.0, abs=1e-6)
            assert row["lam5"] + row["lam6"] == 1.0
        for m in res.noise:
            assert np.sqrt(np.mean(m ** 2)) == pytest.approx(1.0, abs=1e-6)

    def test_symmetric_mode_equal_targets(self, pair, toy_generator, toy_embedders):
        Wm, t1, _ = pair
        res = inv.noise_train(Wm, t1, t1, toy_generator, toy_embedders,
                              steps=10, mode="symmetric")
        for row in res.trace:
            assert row["lam5"] == pytest.approx(0.5)
            # with t1 == t2 the loss collapses to -PSNR(t1, g)
            assert row["loss"] == pytest.approx(-row["psnr_a"], rel=1e-12)

    def test_paper_mode_sign_pattern(self, pair, toy_generator, toy_embedders):
        Wm, t1, t2 = pair
        res = inv.noise_train(Wm, t1, t2, toy_generator, toy_embedders,
                              steps=5, mode="paper")
        for row in res.trace:
            expect = row["lam5"] * row["psnr_a"] - row["lam6"] * row["psnr_b"]
            assert row["loss"] == pytest.approx(expect, rel=1e-9)

    def test_unknown_mode(self, pair, toy_generator, toy_embedders):
        Wm, t1, t2 = pair
        with pytest.raises(inv.InversionError):
            inv.noise_train(Wm, t1, t2, toy_generator, toy_embedders,
                            mode="banana")


class TestLossGradients:
    def test_pixel_and_perceptual_gradients(self, toy_embedders):
        img = T.leaf((3, 16, 16), "g")
        t = RNG.uniform(0, 1, (16, 16, 3))
        pix = inv.pixel_loss_node(T.const(np.transpose(t, (2, 0, 1))), img)
        pert = toy_embedders.build_perceptual_distance_to(
            img, toy_embedders.perceptual_features(t))
        env = {img: RNG.uniform(0.05, 0.95, (3, 16, 16))}
        for node in (pix, pert):
            report = T.finite_diff_check(node, env)
            assert all(c.passed for c in report.values())

    def test_noise_reg_gradient(self):
        m = T.leaf((16, 16), "n")
        node = inv.noise_regularization_node([m])
        report = T.finite_diff_check(node, {m: RNG.standard_normal((16, 16))})
        assert all(c.passed for c in report.values())

    def test_latent_reg_gradient(self):
        W = T.leaf((6, 16), "W")
        node = inv.latent_regularization_node(W)
        report = T.finite_diff_check(node, {W: RNG.standard_normal((6, 16))})
        assert all(c.passed for c in report.values())
