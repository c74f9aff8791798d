"""Landmark-enforced generative face morphing at desk scale.

Pipeline: warp two subjects to their average landmarks, invert the warped
hulls into the latent space of a seeded style-based generator, blend the
latents or PCA-projected styles, synthesize, paste back, and score with
morph-attack metrics.
"""

from .generator import Generator, GeneratorConfig, init_weights
from .embedders import Embedders, EmbedderConfig
from .inversion import InversionConfig, InversionResult, invert, noise_train, psnr
from .blend import StylePCA, average_latents, fit_style_pca, morph_styles
from .metrics import MorphTrial, det_metrics, far_threshold, mmpmr

__version__ = "0.1.0"

__all__ = [
    "Generator", "GeneratorConfig", "init_weights",
    "Embedders", "EmbedderConfig",
    "InversionConfig", "InversionResult", "invert", "noise_train", "psnr",
    "StylePCA", "average_latents", "fit_style_pca", "morph_styles",
    "MorphTrial", "det_metrics", "far_threshold", "mmpmr",
    "__version__",
]
