"""Flat key-value pipeline configuration.

Config files are plain text, one ``key = value`` per line, ``#`` comments;
``--set key=value`` overrides come on top. Every optimization constant is a
named key whose default is the reference training value, so a run with no
config file reproduces the published settings.
"""

from __future__ import annotations

from pathlib import Path

from .embedders import EmbedderConfig
from .generator import GeneratorConfig
from .inversion import InversionConfig


class InputError(ValueError):
    """Bad user input (missing file, unknown key, unparsable value)."""


DEFAULTS: dict[str, object] = {
    "generator.resolution": 64,
    "generator.latent_dim": 64,
    "generator.mapping_depth": 4,
    "generator.max_channels": 64,
    "generator.seed": 0,
    "generator.weights_dir": "",
    "embedders.landmark_count": 16,
    "embedders.identity_dim": 32,
    "embedders.seed": 7,
    "embedders.weights_dir": "",
    "inversion.steps": 1000,
    "inversion.adam_beta1": 0.9,
    "inversion.adam_beta2": 0.999,
    "inversion.lr_peak": 0.1,
    "inversion.lr_rampup_steps": 50,
    "inversion.lr_cosine_rampdown_steps": 600,
    "inversion.latent_noise_hold_steps": 250,
    "inversion.latent_noise_zero_step": 750,
    "inversion.t_s": 400,
    "inversion.lambda_pix": 0.05,
    "inversion.lambda_noise": 1e5,
    "inversion.lambda_lat": 0.1,
    "inversion.lambda_land": 1e-4,
    "inversion.seed": 0,
    "blend.mode": "avg",
    "blend.p": 0.5,
    "paste.feather_px": 2.0,
    "pca.sample_count": 500,
    "pca.seed": 123,
    "noise_train.steps": 200,
    "noise_train.lr": 0.01,
    "noise_train.psnr_loss": "paper",
    "noise_train.seed": 0,
    "evaluate.far": 1e-3,
    "evaluate.impostor_subjects": 64,
    "evaluate.impostor_seed": 404,
    "evaluate.probe_noise_seed": 202,
}


def _parse_value(raw: str):
    s = raw.strip()
    low = s.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def parse_config_file(path) -> dict[str, object]:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"config file not found: {path}")
    out: dict[str, object] = {}
    for lineno, line in enumerate(p.read_text().splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise InputError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = stripped.split("=", 1)
        out[key.strip()] = _parse_value(raw)
    return out


def apply_overrides(values: dict[str, object], pairs) -> dict[str, object]:
    out = dict(values)
    for item in pairs:
        if "=" not in item:
            raise InputError(f"--set needs key=value, got {item!r}")
        key, raw = item.split("=", 1)
        out[key.strip()] = _parse_value(raw)
    return out


class PipelineConfig:
    """Typed view over the flat key space, validated on construction."""

    def __init__(self, values: dict[str, object] | None = None):
        merged = dict(DEFAULTS)
        if values:
            unknown = sorted(set(values) - set(DEFAULTS))
            if unknown:
                raise InputError(f"unknown config keys: {', '.join(unknown)}")
            merged.update(values)
        self.values = merged
        try:
            self.generator_config()
            self.inversion_config()
        except (TypeError, ValueError) as e:
            raise InputError(f"invalid configuration: {e}") from e
        if self.values["blend.mode"] not in ("avg", "pca-max", "pca-norm"):
            raise InputError(f"invalid blend.mode {self.values['blend.mode']!r}")
        if self.values["noise_train.psnr_loss"] not in ("paper", "symmetric"):
            raise InputError("noise_train.psnr_loss must be paper or symmetric")

    def __getitem__(self, key: str):
        return self.values[key]

    def generator_config(self) -> GeneratorConfig:
        v = self.values
        return GeneratorConfig(resolution=int(v["generator.resolution"]),
                               latent_dim=int(v["generator.latent_dim"]),
                               mapping_depth=int(v["generator.mapping_depth"]),
                               max_channels=int(v["generator.max_channels"]),
                               seed=int(v["generator.seed"]))

    def embedder_config(self) -> EmbedderConfig:
        v = self.values
        return EmbedderConfig(resolution=int(v["generator.resolution"]),
                              landmark_count=int(v["embedders.landmark_count"]),
                              identity_dim=int(v["embedders.identity_dim"]),
                              seed=int(v["embedders.seed"]))

    def inversion_config(self) -> InversionConfig:
        v = self.values
        return InversionConfig(
            steps=int(v["inversion.steps"]),
            adam_beta1=float(v["inversion.adam_beta1"]),
            adam_beta2=float(v["inversion.adam_beta2"]),
            lr_peak=float(v["inversion.lr_peak"]),
            lr_rampup_steps=int(v["inversion.lr_rampup_steps"]),
            lr_cosine_rampdown_steps=int(v["inversion.lr_cosine_rampdown_steps"]),
            latent_noise_hold_steps=int(v["inversion.latent_noise_hold_steps"]),
            latent_noise_zero_step=int(v["inversion.latent_noise_zero_step"]),
            t_s=int(v["inversion.t_s"]),
            lambda_pix=float(v["inversion.lambda_pix"]),
            lambda_noise=float(v["inversion.lambda_noise"]),
            lambda_lat=float(v["inversion.lambda_lat"]),
            lambda_land=float(v["inversion.lambda_land"]),
            seed=int(v["inversion.seed"]))
