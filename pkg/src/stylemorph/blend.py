"""Latent and style blending: plain averaging plus the two PCA-domain rules.

The PCA side follows sklearn conventions: ``StylePCA.fit`` on a style corpus,
``transform``/``inverse_transform`` for projection and reconstruction, with
fitted attributes carrying trailing underscores. One model is fit per style
index because the style vectors have heterogeneous dimensions and carry
unrelated information.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .fileio import save_tensor_dir, load_tensor_dir, FileFormatError

BLEND_MODES = ("avg", "pca-max", "pca-norm")


class BlendError(ValueError):
    pass


def average_latents(W1: np.ndarray, W2: np.ndarray) -> np.ndarray:
    """Elementwise midpoint of two latent codes."""
    a = np.asarray(W1, dtype=np.float64)
    b = np.asarray(W2, dtype=np.float64)
    if a.shape != b.shape:
        raise BlendError(f"latent shapes differ: {a.shape} vs {b.shape}")
    return 0.5 * (a + b)


def average_styles(s1: list[np.ndarray], s2: list[np.ndarray]) -> list[np.ndarray]:
    if len(s1) != len(s2):
        raise BlendError(f"style counts differ: {len(s1)} vs {len(s2)}")
    out = []
    for a, b in zip(s1, s2):
        if a.shape != b.shape:
            raise BlendError(f"style dims differ: {a.shape} vs {b.shape}")
        out.append(0.5 * (a + b))
    return out


class StylePCA:
    """PCA over one style index's corpus.

    Fitted attributes: ``mean_`` (d,), ``components_`` (e, d) rows in
    descending eigenvalue order, ``eigenvalues_`` (e,). The basis keeps
    e = min(n_samples - 1, d) directions; with a corpus larger than the
    dimension that is the full space and project/reconstruct is lossless.
    """

    def __init__(self, n_components: int | None = None):
        self.n_components = n_components

    def fit(self, X: np.ndarray) -> "StylePCA":
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] < 2:
            raise BlendError(f"corpus must be (n>=2, d), got {X.shape}")
        n, d = X.shape
        self.mean_ = X.mean(axis=0)
        centered = X - self.mean_
        # SVD of the centered corpus: right singular vectors are the
        # eigenvectors of the covariance, singular values its eigenvalue roots.
        _, s, vt = np.linalg.svd(centered, full_matrices=False)
        e = min(n - 1, d)
        if self.n_components is not None:
            e = min(e, self.n_components)
        comps = vt[:e]
        # deterministic sign: largest-|entry| coordinate made positive
        for row in comps:
            j = int(np.argmax(np.abs(row)))
            if row[j] < 0:
                row *= -1
        self.components_ = comps
        self.eigenvalues_ = (s[:e] ** 2) / (n - 1)
        return self

    def _check_fitted(self):
        if not hasattr(self, "components_"):
            raise BlendError("StylePCA instance is not fitted")

    def transform(self, v: np.ndarray) -> np.ndarray:
        """Projection coefficients of one style vector (mean-centered)."""
        self._check_fitted()
        v = np.asarray(v, dtype=np.float64)
        if v.shape != self.mean_.shape:
            raise BlendError(f"vector dim {v.shape} != model dim {self.mean_.shape}")
        return self.components_ @ (v - self.mean_)

    def inverse_transform(self, coeffs: np.ndarray) -> np.ndarray:
        self._check_fitted()
        coeffs = np.asarray(coeffs, dtype=np.float64)
        if coeffs.shape != (len(self.components_),):
            raise BlendError(f"expected {len(self.components_)} coefficients")
        return self.mean_ + coeffs @ self.components_


def fit_style_pca(corpus: list[list[np.ndarray]]) -> list[StylePCA]:
    """Fit one PCA model per style index over a corpus of style sets."""
    if len(corpus) < 2:
        raise BlendError("PCA corpus needs at least 2 style sets")
    n_styles = len(corpus[0])
    models = []
    for i in range(n_styles):
        try:
            X = np.stack([np.asarray(s[i], dtype=np.float64) for s in corpus])
        except ValueError as e:
            raise BlendError(f"style index {i}: inconsistent dims: {e}") from e
        models.append(StylePCA().fit(X))
    return models


def _head_size(p: float, e: int) -> int:
    if not 0.0 <= p <= 1.0:
        raise BlendError(f"blend fraction p must be in [0,1], got {p}")
    return min(int(np.ceil(p * e)), e)


def _check_pair(s1, s2, models):
    if not (len(s1) == len(s2) == len(models)):
        raise BlendError(
            f"style/model counts differ: {len(s1)}, {len(s2)}, {len(models)}")


def blend_elementwise_max(s1: list[np.ndarray], s2: list[np.ndarray],
                          models: list[StylePCA], p: float,
                          max_by_magnitude: bool = False) -> list[np.ndarray]:
    """Average the first ceil(p*e) projection coefficients, take the
    per-coefficient max of the rest, and reconstruct.

    The max is signed, as the blending rule is written; ``max_by_magnitude``
    switches to picking the larger-|coefficient| value for study.
    """
    _check_pair(s1, s2, models)
    out = []
    for v1, v2, model in zip(s1, s2, models):
        a1 = model.transform(v1)
        a2 = model.transform(v2)
        e = len(a1)
        h = _head_size(p, e)
        mixed = np.empty(e)
        mixed[:h] = 0.5 * (a1[:h] + a2[:h])
        if max_by_magnitude:
            pick = np.abs(a1[h:]) >= np.abs(a2[h:])
            mixed[h:] = np.where(pick, a1[h:], a2[h:])
        else:
            mixed[h:] = np.maximum(a1[h:], a2[h:])
        out.append(model.inverse_transform(mixed))
    return out


def blend_norm_select(s1: list[np.ndarray], s2: list[np.ndarray],
                      models: list[StylePCA], p: float) -> list[np.ndarray]:
    """Average the head coefficients; take the whole tail from the subject
    whose own residual coefficients have the larger L2 norm (ties pick
    subject 1), and reconstruct.
    """
    _check_pair(s1, s2, models)
    out = []
    for v1, v2, model in zip(s1, s2, models):
        a1 = model.transform(v1)
        a2 = model.transform(v2)
        e = len(a1)
        h = _head_size(p, e)
        mixed = np.empty(e)
        mixed[:h] = 0.5 * (a1[:h] + a2[:h])
        if np.linalg.norm(a1[h:]) >= np.linalg.norm(a2[h:]):
            mixed[h:] = a1[h:]
        else:
            mixed[h:] = a2[h:]
        out.append(model.inverse_transform(mixed))
    return out


def morph_styles(s1: list[np.ndarray], s2: list[np.ndarray], mode: str,
                 p: float = 0.5,
                 models: list[StylePCA] | None = None) -> list[np.ndarray]:
    """Dispatch to a blending strategy. ``avg`` ignores p and models."""
    if mode == "avg":
        return average_styles(s1, s2)
    if mode not in BLEND_MODES:
        raise BlendError(f"unknown blend mode {mode!r}; choose from {BLEND_MODES}")
    if models is None:
        raise BlendError(f"mode {mode!r} requires fitted PCA models")
    if mode == "pca-max":
        return blend_elementwise_max(s1, s2, models, p)
    return blend_norm_select(s1, s2, models, p)


# -- serialization -------------------------------------------------------------

def save_pca_models(dirpath, models: list[StylePCA]) -> None:
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    dims = []
    for i, m in enumerate(models):
        m._check_fitted()
        save_tensor_dir(d / f"style{i:03d}", {
            "mean": m.mean_,
            "components": m.components_,
            "eigenvalues": m.eigenvalues_,
        }, meta={"style_index": i})
        dims.append(int(m.mean_.shape[0]))
    manifest = {"format": "pca-models", "count": len(models), "dims": dims,
                "eigencounts": [len(m.eigenvalues_) for m in models]}
    (d / "models.json").write_text(json.dumps(manifest, indent=2))


def load_pca_models(dirpath) -> list[StylePCA]:
    d = Path(dirpath)
    mpath = d / "models.json"
    if not mpath.is_file():
        raise FileFormatError(f"{dirpath}: missing models.json")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != "pca-models":
        raise FileFormatError(f"{dirpath}: not a PCA model directory")
    models = []
    for i in range(manifest["count"]):
        tensors, _ = load_tensor_dir(d / f"style{i:03d}")
        m = StylePCA()
        m.mean_ = tensors["mean"]
        m.components_ = tensors["components"]
        m.eigenvalues_ = tensors["eigenvalues"]
        models.append(m)
    return models
