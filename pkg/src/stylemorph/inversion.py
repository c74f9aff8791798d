"""Latent inversion: composite loss, Adam with ramped/cosine learning rate,
latent-noise exploration, the noise cutoff step, and PSNR-driven noise
training for frozen morph latents.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .embedders import Embedders
from .generator import Generator

PSNR_MAX = 300.0  # sentinel for identical images; keeps traces finite

TRACE_COLUMNS = ("step", "lr", "sigma", "loss_pert", "loss_pix", "loss_noise",
                 "loss_lat", "loss_land", "loss_total", "noise_rms")


class InversionError(ValueError):
    pass


class NumericalError(ArithmeticError):
    """Optimization hit a non-finite value; carries the trace so far."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


@dataclass(frozen=True)
class InversionConfig:
    steps: int = 1000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    lr_peak: float = 0.1
    lr_rampup_steps: int = 50
    lr_cosine_rampdown_steps: int = 600
    latent_noise_hold_steps: int = 250
    latent_noise_zero_step: int = 750
    t_s: int = 400
    lambda_pix: float = 0.05
    lambda_noise: float = 1e5
    lambda_lat: float = 0.1
    lambda_land: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise InversionError("steps must be >= 1")
        if not 0 < self.t_s < self.steps:
            raise InversionError(f"t_s must be in (0, steps), got {self.t_s}")
        if self.lr_rampup_steps + self.lr_cosine_rampdown_steps > self.steps:
            raise InversionError("rampup + rampdown exceed total steps")
        for name in ("lambda_pix", "lambda_noise", "lambda_lat", "lambda_land"):
            if getattr(self, name) < 0:
                raise InversionError(f"{name} must be >= 0")
        if self.latent_noise_zero_step < self.latent_noise_hold_steps:
            raise InversionError("latent noise must not end before its hold phase")

    def to_dict(self) -> dict:
        return asdict(self)


def learning_rate(cfg: InversionConfig, step: int) -> float:
    """Linear 0 -> lr_peak over the rampup, flat, then cosine decay to 0."""
    down_start = cfg.steps - cfg.lr_cosine_rampdown_steps
    if step >= down_start:
        phase = (step - down_start) / cfg.lr_cosine_rampdown_steps
        return cfg.lr_peak * 0.5 * (1.0 + math.cos(math.pi * phase))
    if step < cfg.lr_rampup_steps:
        return cfg.lr_peak * step / cfg.lr_rampup_steps
    return cfg.lr_peak


def exploration_sigma(cfg: InversionConfig, step: int, sigma0: float) -> float:
    """Latent exploration noise: hold sigma0, then linear decay to zero."""
    if step < cfg.latent_noise_hold_steps:
        return sigma0
    if step >= cfg.latent_noise_zero_step:
        return 0.0
    span = cfg.latent_noise_zero_step - cfg.latent_noise_hold_steps
    return sigma0 * (cfg.latent_noise_zero_step - step) / span


# ---------------------------------------------------------------------------
# loss terms: graph builders plus plain-array front ends
# ---------------------------------------------------------------------------

def pixel_loss_node(target: T.Node, g: T.Node) -> T.Node:
    return T.reduce_mean(T.absval(g - target))


def pixel_loss(t: np.ndarray, g: np.ndarray) -> float:
    """Mean absolute difference, L1 over the full pixel count."""
    t = np.asarray(t, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if t.shape != g.shape:
        raise InversionError(f"shape mismatch: {t.shape} vs {g.shape}")
    return float(np.mean(np.abs(t - g)))


def landmark_loss_node(l_t: np.ndarray, xs: T.Node, ys: T.Node) -> T.Node:
    lt = np.asarray(l_t, dtype=np.float64)
    if lt.shape != (xs.shape[0], 2):
        raise InversionError(f"expected {xs.shape[0]} target landmarks, got {lt.shape}")
    dx = xs - T.const(lt[:, 0])
    dy = ys - T.const(lt[:, 1])
    return T.reduce_sum(dx * dx) + T.reduce_sum(dy * dy)


def landmark_loss(l_t: np.ndarray, image: np.ndarray, emb: Embedders) -> float:
    """Squared distance from each localized landmark to its target, summed."""
    found = emb.localize_landmarks(image)
    lt = np.asarray(l_t, dtype=np.float64)
    if lt.shape != found.shape:
        raise InversionError(f"landmark count mismatch: {lt.shape} vs {found.shape}")
    return float(np.sum((lt - found) ** 2))


def noise_regularization_node(noise: list[T.Node]) -> T.Node:
    """Squared mean wraparound autocorrelations over a 2x-avgpool pyramid.

    Each map is self-correlated at one-pixel horizontal and vertical shifts,
    the two normalized sums squared and added, then the map is pooled 2x with
    doubled amplitude and the term repeated until the map is 8x8 or smaller.
    """
    total = None
    for level in noise:
        while True:
            h = T.reduce_mean(level * T.roll(level, 1, 1))
            v = T.reduce_mean(level * T.roll(level, 1, 0))
            term = h * h + v * v
            total = term if total is None else total + term
            if level.shape[-1] <= 8:
                break
            level = T.avgpool_2x(level) * 2.0
    return total if total is not None else T.const(0.0)


def noise_regularization(noise_maps: list[np.ndarray]) -> float:
    leaves = [T.leaf(np.asarray(m).shape) for m in noise_maps]
    node = noise_regularization_node(leaves)
    return float(T.evaluate(node, dict(zip(leaves, noise_maps))))


def latent_regularization_node(W: T.Node) -> T.Node:
    return T.sqrt(T.reduce_mean(W * W))


def latent_regularization(W: np.ndarray) -> float:
    """Root mean square of the full latent code."""
    return float(np.sqrt(np.mean(np.asarray(W, dtype=np.float64) ** 2)))


def _weighted_total(cfg: InversionConfig, pert, pix, noi, lat, land):
    total = pert + pix * cfg.lambda_pix
    total = total + noi * cfg.lambda_noise
    total = total + lat * cfg.lambda_lat
    return total + land * cfg.lambda_land


def total_loss(t: np.ndarray, g: np.ndarray, l_t: np.ndarray, W: np.ndarray,
               noise_maps: list[np.ndarray], emb: Embedders,
               cfg: InversionConfig) -> tuple[float, dict[str, float]]:
    """Composite synthesis loss and its per-term breakdown."""
    terms = {
        "loss_pert": emb.perceptual_distance(t, g),
        "loss_pix": pixel_loss(t, g),
        "loss_noise": noise_regularization(noise_maps),
        "loss_lat": latent_regularization(W),
        "loss_land": landmark_loss(l_t, g, emb),
    }
    total = _weighted_total(cfg, terms["loss_pert"], terms["loss_pix"],
                            terms["loss_noise"], terms["loss_lat"],
                            terms["loss_land"])
    return float(total), terms


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB on the 8-bit intensity scale.

    Images live in [0,1]; the 255 scaling cancels, leaving -10*log10(MSE).
    Identical inputs return the PSNR_MAX sentinel instead of infinity.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InversionError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_MAX
    return min(-10.0 * math.log10(mse), PSNR_MAX)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Minimal Adam with bias correction; one slot per parameter key."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self._m: dict = {}
        self._v: dict = {}
        self._t: dict = {}

    def step(self, key, value: np.ndarray, grad: np.ndarray,
             lr: float) -> np.ndarray:
        m = self._m.get(key)
        if m is None:
            m = np.zeros_like(value)
            self._v[key] = np.zeros_like(value)
            self._t[key] = 0
        v = self._v[key]
        t = self._t[key] + 1
        m = self.beta1 * m + (1 - self.beta1) * grad
        v = self.beta2 * v + (1 - self.beta2) * grad * grad
        self._m[key], self._v[key], self._t[key] = m, v, t
        mhat = m / (1 - self.beta1 ** t)
        vhat = v / (1 - self.beta2 ** t)
        return value - lr * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------------------
# inversion loop
# ---------------------------------------------------------------------------

@dataclass
class InversionResult:
    W: np.ndarray
    noise: list[np.ndarray]
    trace: list[dict] = field(repr=False, default_factory=list)


def _max_noise_rms(maps: list[np.ndarray]) -> float:
    return max(float(np.sqrt(np.mean(m ** 2))) for m in maps)


def invert(target: np.ndarray, target_landmarks: np.ndarray, gen: Generator,
           emb: Embedders, cfg: InversionConfig) -> InversionResult:
    """Optimize a per-layer latent code and noise set to reconstruct ``target``.

    Adam runs over {W, noise maps} with the ramped/cosine schedule; Gaussian
    exploration noise is added to W each step (amplitude tied to the initial
    W scale); at step t_s every noise map is zeroed and dropped from the
    trainable set. Returns the final W, the (zeroed) noise and a full
    per-step, per-term trace.
    """
    target = np.asarray(target, dtype=np.float64)
    r = gen.config.resolution
    if target.shape != (r, r, 3):
        raise InversionError(f"target must be {r}x{r}x3, got {target.shape}")
    if emb.config.resolution != r:
        raise InversionError("embedder resolution does not match generator")
    l_t = np.asarray(target_landmarks, dtype=np.float64)
    if l_t.shape != (emb.config.landmark_count, 2):
        raise InversionError(
            f"need {emb.config.landmark_count} target landmarks, got {l_t.shape}")

    rng = np.random.default_rng(cfg.seed)
    W = gen.broadcast_w(gen.w_mean(samples=1000, seed=cfg.seed))
    sigma0 = 0.05 * float(np.sqrt(np.mean(W ** 2)))
    maps = [rng.standard_normal((res, res))
            for res in (s.resolution for s in gen.layout if s.kind == "conv")]

    w_leaf, noise_leaves, img = gen._from_w_program()
    t_chw = np.transpose(target, (2, 0, 1))
    pert = emb.build_perceptual_distance_to(img, emb.perceptual_features(target))
    pix = pixel_loss_node(T.const(t_chw), img)
    noi = noise_regularization_node(noise_leaves)
    lat = latent_regularization_node(w_leaf)
    xs, ys = emb.build_landmark_coords(img)
    land = landmark_loss_node(l_t, xs, ys)
    total = _weighted_total(cfg, pert, pix, noi, lat, land)
    term_nodes = [pert, pix, noi, lat, land, total]

    adam = Adam(cfg.adam_beta1, cfg.adam_beta2)
    trace: list[dict] = []
    noise_trainable = True
    for step in range(cfg.steps):
        if step == cfg.t_s:
            maps = [np.zeros_like(m) for m in maps]
            noise_trainable = False
        lr = learning_rate(cfg, step)
        sigma = exploration_sigma(cfg, step, sigma0)
        w_probe = W + sigma * rng.standard_normal(W.shape)
        env = {w_leaf: w_probe}
        env.update(zip(noise_leaves, maps))
        wrt = [w_leaf] + (list(noise_leaves) if noise_trainable else [])
        try:
            values, grads = T.evaluate_with_gradients(term_nodes, total, wrt, env)
        except T.NonFiniteError as e:
            raise NumericalError(str(e), trace) from e
        row = {"step": step, "lr": lr, "sigma": sigma,
               "loss_pert": float(values[0]), "loss_pix": float(values[1]),
               "loss_noise": float(values[2]), "loss_lat": float(values[3]),
               "loss_land": float(values[4]), "loss_total": float(values[5]),
               "noise_rms": _max_noise_rms(maps)}
        trace.append(row)
        W = adam.step(w_leaf, W, grads[w_leaf], lr)
        if noise_trainable:
            maps = [adam.step(nl, m, grads[nl], lr)
                    for nl, m in zip(noise_leaves, maps)]
    return InversionResult(W=W, noise=maps, trace=trace)


# ---------------------------------------------------------------------------
# noise training for a frozen morph latent
# ---------------------------------------------------------------------------

NOISE_TRAIN_COLUMNS = ("step", "lam5", "lam6", "psnr_a", "psnr_b", "loss",
                       "min_rms", "max_rms")


@dataclass
class NoiseTrainResult:
    noise: list[np.ndarray]
    trace: list[dict] = field(repr=False, default_factory=list)


def _psnr_node(target_chw: np.ndarray, img: T.Node) -> T.Node:
    d = img - T.const(target_chw)
    mse = T.reduce_mean(d * d)
    return T.log(mse) * (-10.0 / math.log(10.0))


def noise_train(W_morph: np.ndarray, t1: np.ndarray, t2: np.ndarray,
                gen: Generator, emb: Embedders, steps: int = 200,
                betas: tuple[float, float] = (0.9, 0.999), lr: float = 0.01,
                mode: str = "paper", seed: int = 0) -> NoiseTrainResult:
    """Train complementary noise for a frozen morph latent.

    The loss balances PSNR to the two contributing subjects with identity
    scalars recomputed every step from embedded distances (lam5 + lam6 == 1).
    ``mode="paper"`` uses the sign pattern as printed (+lam5*PSNR_a -
    lam6*PSNR_b); ``mode="symmetric"`` maximizes both PSNRs. After every
    optimizer step every noise map is rescaled to unit RMS.
    """
    if mode not in ("paper", "symmetric"):
        raise InversionError(f"unknown psnr-loss mode {mode!r}")
    if steps < 1:
        raise InversionError("steps must be >= 1")
    r = gen.config.resolution
    for name, img_arr in (("t1", t1), ("t2", t2)):
        if np.asarray(img_arr).shape != (r, r, 3):
            raise InversionError(f"{name} must be {r}x{r}x3")

    rng = np.random.default_rng(seed)
    maps = [rng.standard_normal((res, res))
            for res in (s.resolution for s in gen.layout if s.kind == "conv")]
    noise_leaves = gen.noise_leaves()
    styles = gen.affine_styles(W_morph)
    style_nodes = [T.const(s) for s in styles]
    img = gen.build_synthesis(style_nodes, noise_leaves)

    p1 = _psnr_node(np.transpose(np.asarray(t1, dtype=np.float64), (2, 0, 1)), img)
    p2 = _psnr_node(np.transpose(np.asarray(t2, dtype=np.float64), (2, 0, 1)), img)
    lam5_leaf = T.leaf((), name="lam5")
    lam6_leaf = T.leaf((), name="lam6")
    if mode == "paper":
        loss = lam5_leaf * p1 - lam6_leaf * p2
    else:
        loss = -(lam5_leaf * p1) - lam6_leaf * p2

    e1 = emb.identity_embed(np.asarray(t1, dtype=np.float64))
    e2 = emb.identity_embed(np.asarray(t2, dtype=np.float64))
    adam = Adam(*betas)
    trace: list[dict] = []
    for step in range(steps):
        env = dict(zip(noise_leaves, maps))
        g_img = np.transpose(T.evaluate(img, env), (1, 2, 0))
        em = emb.identity_embed(g_img)
        d1 = 1.0 - emb.identity_similarity(em, e1)
        d2 = 1.0 - emb.identity_similarity(em, e2)
        lam5 = d1 / (d1 + d2) if d1 + d2 > 1e-12 else 0.5
        lam6 = 1.0 - lam5
        env[lam5_leaf] = np.float64(lam5)
        env[lam6_leaf] = np.float64(lam6)
        try:
            values, grads = T.evaluate_with_gradients([p1, p2, loss], loss,
                                                      list(noise_leaves), env)
        except T.NonFiniteError as e:
            raise NumericalError(str(e), trace) from e
        new_maps = []
        for nl, m in zip(noise_leaves, maps):
            stepped = adam.step(nl, m, grads[nl], lr)
            rms = float(np.sqrt(np.mean(stepped ** 2)))
            new_maps.append(stepped / rms if rms > 0 else stepped)
        maps = new_maps
        rmss = [float(np.sqrt(np.mean(m ** 2))) for m in maps]
        trace.append({"step": step, "lam5": lam5, "lam6": lam6,
                      "psnr_a": float(values[0]), "psnr_b": float(values[1]),
                      "loss": float(values[2]),
                      "min_rms": min(rmss), "max_rms": max(rmss)})
    return NoiseTrainResult(noise=maps, trace=trace)
