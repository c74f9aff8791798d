"""A small style-based image generator with seeded, frozen weights.

Architecture: a mapping MLP z -> w, per-layer learned affine transforms
turning w rows into style vectors, modulated 3x3 convolutions with
demodulation and per-layer noise, and 1x1 to-RGB conversions accumulated
through bilinear-upsampled skips. Weights are never trained here; a seeded
initialization defines the image manifold, and everything is differentiable
through the tensor graph for latent optimization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .fileio import save_tensor_dir, load_tensor_dir

LEAKY_SLOPE = 0.2
RGB_GAIN = 0.5
NOISE_SCALE_INIT = 0.1
_LRELU_GAIN = math.sqrt(2.0 / (1.0 + LEAKY_SLOPE ** 2))


class ConfigError(ValueError):
    pass


def default_channel_schedule(resolution: int, max_channels: int) -> dict[int, int]:
    res, sched = 4, {}
    while res <= resolution:
        sched[res] = int(min(max_channels, max(8, 512 // res)))
        res *= 2
    return sched


@dataclass(frozen=True)
class GeneratorConfig:
    resolution: int = 64
    latent_dim: int = 64
    mapping_depth: int = 4
    base_resolution: int = 4
    max_channels: int = 64
    channels: dict[int, int] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        r = self.resolution
        if r < 8 or r & (r - 1):
            raise ConfigError(f"resolution must be a power of two >= 8, got {r}")
        if self.base_resolution != 4:
            raise ConfigError("base_resolution is fixed at 4")
        if self.latent_dim < 1 or self.mapping_depth < 1:
            raise ConfigError("latent_dim and mapping_depth must be positive")
        if not self.channels:
            object.__setattr__(
                self, "channels",
                default_channel_schedule(self.resolution, self.max_channels))
        for res in self.resolutions:
            if res not in self.channels:
                raise ConfigError(f"channel schedule missing resolution {res}")

    @property
    def resolutions(self) -> list[int]:
        return [4 * 2 ** i for i in range(self.num_blocks)]

    @property
    def num_blocks(self) -> int:
        return int(math.log2(self.resolution // 4)) + 1

    @property
    def num_conv_layers(self) -> int:
        return 2 * (self.num_blocks - 1) + 1

    @property
    def num_latent_layers(self) -> int:
        """Rows in a latent code W; one more than the conv count."""
        return self.num_conv_layers + 1

    @property
    def num_styles(self) -> int:
        return self.num_conv_layers + self.num_blocks

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = {str(k): v for k, v in self.channels.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        if "channels" in d:
            d["channels"] = {int(k): int(v) for k, v in d["channels"].items()}
        return cls(**d)


@dataclass(frozen=True)
class StyleSlot:
    """One style vector's place in the network."""
    index: int
    kind: str        # "conv" or "trgb"
    layer: int       # conv index or block index
    resolution: int
    w_row: int       # latent row feeding this slot's affine transform
    dim: int         # input-channel count of the modulated layer


def style_layout(config: GeneratorConfig) -> list[StyleSlot]:
    """Slots in synthesis order: each block's convs, then its RGB conversion.

    A conversion layer's affine receives the latent row applied to the last
    conv of its block, so the final latent row feeds no style slot.
    """
    slots = []
    conv_in = []
    prev_c = config.channels[4]
    for b, res in enumerate(config.resolutions):
        c = config.channels[res]
        if b == 0:
            conv_in.append((0, res, prev_c))
        else:
            conv_in.append((2 * b - 1, res, prev_c))
            conv_in.append((2 * b, res, c))
        prev_c = c
    idx = 0
    for b, res in enumerate(config.resolutions):
        block_convs = [t for t in conv_in if t[1] == res]
        for j, _, cin in block_convs:
            slots.append(StyleSlot(idx, "conv", j, res, j, cin))
            idx += 1
        last_row = block_convs[-1][0]
        slots.append(StyleSlot(idx, "trgb", b, res, last_row,
                               config.channels[res]))
        idx += 1
    return slots


def init_weights(config: GeneratorConfig) -> dict[str, np.ndarray]:
    """Seeded unit-variance-scaled weights, drawn as f32 values in f64 arrays.

    Same seed, same config: bit-identical weights; the f32 draws round-trip
    exactly through the on-disk format.
    """
    rng = np.random.default_rng(config.seed)

    def draw(shape, std):
        a = rng.standard_normal(shape, dtype=np.float32)
        return (a * np.float32(std)).astype(np.float64)

    nw = config.latent_dim
    w: dict[str, np.ndarray] = {}
    for i in range(config.mapping_depth):
        w[f"mapping.{i}.w"] = draw((nw, nw), _LRELU_GAIN / math.sqrt(nw))
        w[f"mapping.{i}.b"] = np.zeros(nw)
    w["const"] = draw((config.channels[4], 4, 4), 1.0)
    for slot in style_layout(config):
        if slot.kind == "conv":
            key = f"conv.{slot.layer}"
            cout = config.channels[slot.resolution]
            w[f"{key}.w"] = draw((cout, slot.dim, 3, 3),
                                 _LRELU_GAIN / math.sqrt(slot.dim * 9))
            w[f"{key}.b"] = np.zeros(cout)
            w[f"{key}.noise_scale"] = np.float64(np.float32(NOISE_SCALE_INIT))
        else:
            key = f"trgb.{slot.layer}"
            w[f"{key}.w"] = draw((3, slot.dim, 1, 1), 1.0 / math.sqrt(slot.dim))
            w[f"{key}.b"] = np.zeros(3)
        w[f"affine.{slot.index}.w"] = draw((nw, slot.dim), 1.0 / math.sqrt(nw))
        w[f"affine.{slot.index}.b"] = np.ones(slot.dim)
    return w


def save_weights(dirpath, config: GeneratorConfig, weights: dict) -> None:
    save_tensor_dir(dirpath, weights, meta={"generator": config.to_dict()},
                    dtype="f32")


def load_weights(dirpath) -> tuple[GeneratorConfig, dict[str, np.ndarray]]:
    tensors, meta = load_tensor_dir(dirpath)
    return GeneratorConfig.from_dict(meta["generator"]), tensors


class Generator:
    """Frozen generator bound to a config; all outputs deterministic."""

    def __init__(self, config: GeneratorConfig,
                 weights: dict[str, np.ndarray] | None = None):
        self.config = config
        self.weights = init_weights(config) if weights is None else weights
        self.layout = style_layout(config)
        self._const = {k: T.const(v, name=k) for k, v in self.weights.items()}
        self._cache: dict = {}

    # -- graph builders ------------------------------------------------------

    def build_mapping(self, z: T.Node) -> T.Node:
        """Mapping network over a (N, latent_dim) batch of z vectors."""
        x = z
        norm = T.pow_scalar(T.reduce_mean(x * x, axes=-1, keepdims=True) + 1e-8, -0.5)
        x = x * norm
        for i in range(self.config.mapping_depth):
            x = T.linear(x, self._const[f"mapping.{i}.w"],
                         self._const[f"mapping.{i}.b"])
            x = T.leaky_relu(x, LEAKY_SLOPE)
        return x

    def _row(self, W: T.Node, row: int) -> T.Node:
        sel = np.zeros((1, W.shape[0]))
        sel[0, row] = 1.0
        return T.matmul(T.const(sel), W)

    def build_styles_from_w(self, W: T.Node) -> list[T.Node]:
        """Affine transforms of the latent rows, one node per style slot."""
        rows: dict[int, T.Node] = {}
        styles = []
        for slot in self.layout:
            if slot.w_row not in rows:
                rows[slot.w_row] = self._row(W, slot.w_row)
            r = rows[slot.w_row]
            s = T.linear(r, self._const[f"affine.{slot.index}.w"],
                         self._const[f"affine.{slot.index}.b"])
            styles.append(T.reshape(s, (slot.dim,)))
        return styles

    def build_synthesis(self, styles: list[T.Node],
                        noise: list[T.Node]) -> T.Node:
        """Image node (3, R, R) in [0,1] from style and noise nodes."""
        cfg = self.config
        if len(styles) != cfg.num_styles:
            raise ConfigError(f"expected {cfg.num_styles} styles, got {len(styles)}")
        if len(noise) != cfg.num_conv_layers:
            raise ConfigError(f"expected {cfg.num_conv_layers} noise maps, got {len(noise)}")
        x = self._const["const"]
        rgb = None
        si = 0
        for b, res in enumerate(cfg.resolutions):
            if b > 0:
                x = T.upsample_2x(x)
            n_convs = 1 if b == 0 else 2
            for _ in range(n_convs):
                slot = self.layout[si]
                key = f"conv.{slot.layer}"
                x = T.modulated_conv2d(x, self._const[f"{key}.w"], styles[si],
                                       pad=1, demodulate=True)
                nmap = noise[slot.layer]
                if nmap.shape != (res, res):
                    raise ConfigError(
                        f"noise map {slot.layer} must be {res}x{res}, got {nmap.shape}")
                x = x + T.reshape(nmap, (1, res, res)) * self._const[f"{key}.noise_scale"]
                c = cfg.channels[res]
                x = x + T.reshape(self._const[f"{key}.b"], (c, 1, 1))
                x = T.leaky_relu(x, LEAKY_SLOPE)
                si += 1
            slot = self.layout[si]
            key = f"trgb.{slot.layer}"
            y = T.modulated_conv2d(x, self._const[f"{key}.w"], styles[si],
                                   pad=0, demodulate=False)
            y = y + T.reshape(self._const[f"{key}.b"], (3, 1, 1))
            rgb = y if rgb is None else T.upsample_2x(rgb) + y
            si += 1
        return T.clamp(0.5 + RGB_GAIN * rgb, 0.0, 1.0)

    def build_from_w(self, W: T.Node, noise: list[T.Node]) -> T.Node:
        return self.build_synthesis(self.build_styles_from_w(W), noise)

    def noise_leaves(self) -> list[T.Node]:
        return [T.leaf((s.resolution, s.resolution), name=f"noise{s.layer}")
                for s in self.layout if s.kind == "conv"]

    # -- numpy front ends -------------------------------------------------------

    def _mapping_program(self, n: int):
        key = ("map", n)
        if key not in self._cache:
            z = T.leaf((n, self.config.latent_dim), name="z")
            self._cache[key] = (z, self.build_mapping(z))
        return self._cache[key]

    def map_latent(self, z: np.ndarray) -> np.ndarray:
        """Map z to w; accepts one vector or an (N, latent_dim) batch."""
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        zb = z[None] if single else z
        zl, out = self._mapping_program(zb.shape[0])
        w = T.evaluate(out, {zl: zb})
        return w[0] if single else w

    def w_mean(self, samples: int = 1000, seed: int = 0) -> np.ndarray:
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((samples, self.config.latent_dim))
        return self.map_latent(z).mean(axis=0)

    def broadcast_w(self, w: np.ndarray) -> np.ndarray:
        """Tile one w vector into a full per-layer latent code."""
        w = np.asarray(w, dtype=np.float64)
        return np.repeat(w[None, :], self.config.num_latent_layers, axis=0)

    def affine_styles(self, W: np.ndarray) -> list[np.ndarray]:
        W = np.asarray(W, dtype=np.float64)
        expect = (self.config.num_latent_layers, self.config.latent_dim)
        if W.shape != expect:
            raise ConfigError(f"latent code must be {expect}, got {W.shape}")
        key = "affine"
        if key not in self._cache:
            wl = T.leaf(expect, name="W")
            self._cache[key] = (wl, self.build_styles_from_w(wl))
        wl, nodes = self._cache[key]
        return T.evaluate(nodes, {wl: W})

    def affine_styles_batch(self, w_batch: np.ndarray) -> list[np.ndarray]:
        """Styles for a batch of single w vectors (each broadcast to all rows)."""
        wb = np.asarray(w_batch, dtype=np.float64)
        key = ("affine_batch", wb.shape[0])
        if key not in self._cache:
            wl = T.leaf(wb.shape, name="w_batch")
            nodes = [T.linear(wl, self._const[f"affine.{s.index}.w"],
                              self._const[f"affine.{s.index}.b"])
                     for s in self.layout]
            self._cache[key] = (wl, nodes)
        wl, nodes = self._cache[key]
        return T.evaluate(nodes, {wl: wb})

    def _synth_program(self):
        if "synth" not in self._cache:
            styles = [T.leaf((s.dim,), name=f"style{s.index}") for s in self.layout]
            noise = self.noise_leaves()
            self._cache["synth"] = (styles, noise, self.build_synthesis(styles, noise))
        return self._cache["synth"]

    def _from_w_program(self):
        if "from_w" not in self._cache:
            wl = T.leaf((self.config.num_latent_layers, self.config.latent_dim),
                        name="W")
            noise = self.noise_leaves()
            self._cache["from_w"] = (wl, noise, self.build_from_w(wl, noise))
        return self._cache["from_w"]

    def synthesize(self, styles: list[np.ndarray],
                   noise: list[np.ndarray]) -> np.ndarray:
        """Render an HxWx3 image in [0,1] from explicit style vectors."""
        sl, nl, img = self._synth_program()
        env = {l: s for l, s in zip(sl, styles)}
        env.update(zip(nl, noise))
        return np.transpose(T.evaluate(img, env), (1, 2, 0))

    def synthesize_from_w(self, W: np.ndarray,
                          noise: list[np.ndarray]) -> np.ndarray:
        wl, nl, img = self._from_w_program()
        env = {wl: np.asarray(W, dtype=np.float64)}
        env.update(zip(nl, noise))
        return np.transpose(T.evaluate(img, env), (1, 2, 0))

    def zero_noise(self) -> list[np.ndarray]:
        return [np.zeros((s.resolution, s.resolution))
                for s in self.layout if s.kind == "conv"]

    def random_noise(self, seed: int) -> list[np.ndarray]:
        rng = np.random.default_rng(seed)
        return [rng.standard_normal((s.resolution, s.resolution))
                for s in self.layout if s.kind == "conv"]
