import numpy as np
import pytest

from stylemorph import Embedders, EmbedderConfig, Generator, GeneratorConfig
from stylemorph.inversion import InversionConfig

TOY_GEN = GeneratorConfig(resolution=16, latent_dim=16, mapping_depth=2,
                          max_channels=8, seed=1)
TOY_EMB = EmbedderConfig(resolution=16, landmark_count=16, seed=7)


def toy_inversion_config(**overrides) -> InversionConfig:
    """300-step schedule with the paper ratios scaled to toy length."""
    kw = dict(steps=300, lr_rampup_steps=15, lr_cosine_rampdown_steps=180,
              latent_noise_hold_steps=75, latent_noise_zero_step=225,
              t_s=120, seed=11)
    kw.update(overrides)
    return InversionConfig(**kw)


@pytest.fixture(scope="session")
def toy_generator() -> Generator:
    return Generator(TOY_GEN)


@pytest.fixture(scope="session")
def toy_embedders() -> Embedders:
    return Embedders(TOY_EMB)


@pytest.fixture(scope="session")
def toy_targets(toy_generator):
    """Five seeded in-manifold images with their latent sources."""
    out = []
    for i in range(5):
        rng = np.random.default_rng(1000 + i)
        w = toy_generator.map_latent(rng.standard_normal(TOY_GEN.latent_dim))
        W = toy_generator.broadcast_w(w)
        img = toy_generator.synthesize_from_w(W, toy_generator.zero_noise())
        out.append((W, img))
    return out
