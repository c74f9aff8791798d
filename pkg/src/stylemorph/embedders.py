"""Fixed, seeded, differentiable embedding heads.

Three frozen random conv stacks stand in for the pretrained networks a full
pipeline would use: a multi-layer perceptual embedder (feature-space image
distance), a landmark localizer (per-landmark heatmaps read out by spatial
soft-argmax, so landmark positions are differentiable in the image), and an
identity embedder (unit vector per image, similarity = dot product). Random
features keep locality and smoothness, which is all the optimization-behavior
tests need, and the seed fully determines every output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .fileio import save_tensor_dir, load_tensor_dir
from .generator import LEAKY_SLOPE, _LRELU_GAIN

HEATMAP_GAIN = 20.0
DEFAULT_SEED = 7

_PERT_CHANNELS = (8, 16, 24)
_LOC_HIDDEN = 16
_ID_CHANNELS = (8, 16)


class EmbedderError(ValueError):
    pass


@dataclass(frozen=True)
class EmbedderConfig:
    resolution: int
    landmark_count: int = 16
    identity_dim: int = 32
    perceptual_max_input: int = 256
    seed: int = DEFAULT_SEED

    @property
    def embed_size(self) -> int:
        """Perceptual input size; mirrors the 4x downsample of large inputs."""
        if self.resolution >= 4 * self.perceptual_max_input:
            return self.resolution // 4
        return self.resolution

    def to_dict(self) -> dict:
        return asdict(self)


def init_embedder_weights(cfg: EmbedderConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)

    def draw(shape, std):
        a = rng.standard_normal(shape, dtype=np.float32)
        return (a * np.float32(std)).astype(np.float64)

    def conv(cout, cin):
        return draw((cout, cin, 3, 3), _LRELU_GAIN / math.sqrt(cin * 9))

    w: dict[str, np.ndarray] = {}
    cin = 3
    for i, cout in enumerate(_PERT_CHANNELS):
        w[f"pert.{i}.w"] = conv(cout, cin)
        w[f"pert.{i}.b"] = np.zeros(cout)
        cin = cout
    w["loc.0.w"] = conv(_LOC_HIDDEN, 3)
    w["loc.0.b"] = np.zeros(_LOC_HIDDEN)
    w["loc.1.w"] = conv(cfg.landmark_count, _LOC_HIDDEN)
    w["loc.1.b"] = np.zeros(cfg.landmark_count)
    cin = 3
    for i, cout in enumerate(_ID_CHANNELS):
        w[f"id.{i}.w"] = conv(cout, cin)
        w[f"id.{i}.b"] = np.zeros(cout)
        cin = cout
    w["id.fc.w"] = draw((_ID_CHANNELS[-1], cfg.identity_dim),
                        1.0 / math.sqrt(_ID_CHANNELS[-1]))
    w["id.fc.b"] = np.zeros(cfg.identity_dim)
    return w


def save_embedder_weights(dirpath, cfg: EmbedderConfig, weights: dict) -> None:
    save_tensor_dir(dirpath, weights, meta={"embedders": cfg.to_dict()}, dtype="f32")


def load_embedder_weights(dirpath) -> tuple[EmbedderConfig, dict]:
    tensors, meta = load_tensor_dir(dirpath)
    return EmbedderConfig(**meta["embedders"]), tensors


def _chw(image: np.ndarray) -> np.ndarray:
    a = np.asarray(image, dtype=np.float64)
    if a.ndim != 3 or a.shape[2] != 3:
        raise EmbedderError(f"expected HxWx3 image, got {a.shape}")
    return np.transpose(a, (2, 0, 1))


class Embedders:
    """The three frozen heads bound to one config and weight set."""

    def __init__(self, config: EmbedderConfig,
                 weights: dict[str, np.ndarray] | None = None):
        self.config = config
        self.weights = init_embedder_weights(config) if weights is None else weights
        self._const = {k: T.const(v, name=k) for k, v in self.weights.items()}
        self._cache: dict = {}

    # -- shared pieces -----------------------------------------------------

    def _conv_block(self, x: T.Node, key: str) -> T.Node:
        w = self._const[f"{key}.w"]
        b = self._const[f"{key}.b"]
        y = T.conv2d(x, w, pad=1)
        y = y + T.reshape(b, (w.shape[0], 1, 1))
        return T.leaky_relu(y, LEAKY_SLOPE)

    # -- perceptual head ------------------------------------------------------

    def build_perceptual_embedding(self, img: T.Node) -> list[T.Node]:
        """Channel-unit-normalized multi-layer features, scaled so each layer
        contributes like one unit vector per spatial cell."""
        d = self.config.embed_size
        x = T.resize_bilinear(img, d, d) if img.shape[-2:] != (d, d) else img
        x = x - 0.5
        feats = []
        for i in range(len(_PERT_CHANNELS)):
            if i > 0:
                x = T.avgpool_2x(x)
            x = self._conv_block(x, f"pert.{i}")
            sq = T.reduce_sum(x * x, axes=0, keepdims=True)
            unit = x * T.pow_scalar(sq + 1e-10, -0.5)
            _, h, w = unit.shape
            feats.append(unit * (1.0 / math.sqrt(h * w)))
        return feats

    def build_perceptual_distance_to(self, img: T.Node,
                                     target_feats: list[np.ndarray]) -> T.Node:
        """Distance from a graph image to precomputed target features."""
        feats = self.build_perceptual_embedding(img)
        total = None
        for f, tf in zip(feats, target_feats):
            d = f - T.const(tf)
            s = T.reduce_sum(d * d)
            total = s if total is None else total + s
        return T.sqrt(total)

    def build_perceptual_distance(self, a: T.Node, b: T.Node) -> T.Node:
        fa = self.build_perceptual_embedding(a)
        fb = self.build_perceptual_embedding(b)
        total = None
        for x, y in zip(fa, fb):
            d = x - y
            s = T.reduce_sum(d * d)
            total = s if total is None else total + s
        return T.sqrt(total)

    def perceptual_features(self, image: np.ndarray) -> list[np.ndarray]:
        chw = _chw(image)
        key = ("pert_feats", chw.shape)
        if key not in self._cache:
            il = T.leaf(chw.shape, name="img")
            self._cache[key] = (il, self.build_perceptual_embedding(il))
        il, nodes = self._cache[key]
        return T.evaluate(nodes, {il: chw})

    def perceptual_distance(self, t: np.ndarray, g: np.ndarray) -> float:
        tc, gc = _chw(t), _chw(g)
        if tc.shape != gc.shape:
            raise EmbedderError(f"image shapes differ: {t.shape} vs {g.shape}")
        key = ("pert_dist", tc.shape)
        if key not in self._cache:
            ta = T.leaf(tc.shape, name="t")
            ga = T.leaf(gc.shape, name="g")
            self._cache[key] = (ta, ga, self.build_perceptual_distance(ta, ga))
        ta, ga, node = self._cache[key]
        return float(T.evaluate(node, {ta: tc, ga: gc}))

    # -- landmark localizer -----------------------------------------------------

    def build_landmark_coords(self, img: T.Node) -> tuple[T.Node, T.Node]:
        """Soft-argmax landmark coordinates (xs, ys) in pixels, each (k,).

        Heatmap logits are scaled by a fixed gain before the spatial softmax
        so localized stimuli produce peaked distributions; a uniform heatmap
        reads out as the image centroid.
        """
        r = self.config.resolution
        if img.shape[-2:] != (r, r):
            raise EmbedderError(f"localizer expects {r}x{r} input, got {img.shape}")
        x = self._conv_block(img - 0.5, "loc.0")
        w = self._const["loc.1.w"]
        logits = T.conv2d(x, w, pad=1)
        logits = logits + T.reshape(self._const["loc.1.b"], (w.shape[0], 1, 1))
        p = T.softmax(logits * HEATMAP_GAIN, axes=(1, 2))
        xduct = T.const(np.broadcast_to(np.arange(r, dtype=np.float64), (r, r)).reshape(1, r, r))
        yduct = T.const(np.broadcast_to(np.arange(r, dtype=np.float64)[:, None], (r, r)).reshape(1, r, r))
        xs = T.reduce_sum(p * xduct, axes=(1, 2))
        ys = T.reduce_sum(p * yduct, axes=(1, 2))
        return xs, ys

    def localize_landmarks(self, image: np.ndarray) -> np.ndarray:
        chw = _chw(image)
        key = ("loc", chw.shape)
        if key not in self._cache:
            il = T.leaf(chw.shape, name="img")
            self._cache[key] = (il, self.build_landmark_coords(il))
        il, (xs, ys) = self._cache[key]
        xv, yv = T.evaluate([xs, ys], {il: chw})
        return np.stack([xv, yv], axis=1)

    # -- identity head --------------------------------------------------------------

    def build_identity(self, img: T.Node) -> T.Node:
        """L2-normalized identity embedding node of shape (identity_dim,)."""
        x = img - 0.5
        for i in range(len(_ID_CHANNELS)):
            x = self._conv_block(x, f"id.{i}")
            x = T.avgpool_2x(x)
        pooled = T.reduce_mean(x, axes=(1, 2))
        e = T.linear(T.reshape(pooled, (1, _ID_CHANNELS[-1])),
                     self._const["id.fc.w"], self._const["id.fc.b"])
        e = T.reshape(e, (self.config.identity_dim,))
        inv = T.pow_scalar(T.reduce_sum(e * e) + 1e-24, -0.5)
        return e * inv

    def _identity_program(self, shape):
        key = ("id", shape)
        if key not in self._cache:
            il = T.leaf(shape, name="img")
            x = il - 0.5
            for i in range(len(_ID_CHANNELS)):
                x = self._conv_block(x, f"id.{i}")
                x = T.avgpool_2x(x)
            pooled = T.reduce_mean(x, axes=(1, 2))
            e = T.linear(T.reshape(pooled, (1, _ID_CHANNELS[-1])),
                         self._const["id.fc.w"], self._const["id.fc.b"])
            self._cache[key] = (il, T.reshape(e, (self.config.identity_dim,)))
        return self._cache[key]

    def identity_embed(self, image: np.ndarray) -> np.ndarray:
        il, raw = self._identity_program(_chw(image).shape)
        e = T.evaluate(raw, {il: _chw(image)})
        norm = float(np.linalg.norm(e))
        if norm < 1e-12:
            raise EmbedderError("zero-norm identity embedding")
        return e / norm

    @staticmethod
    def identity_similarity(e1: np.ndarray, e2: np.ndarray) -> float:
        return float(np.dot(np.asarray(e1), np.asarray(e2)))
