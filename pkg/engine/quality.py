"""No-reference image quality (MSCN statistics, NIQE distance), dataset filtering and PSNR."""

from __future__ import annotations

import math
from collections.abc import Mapping
from pathlib import Path
from typing import NamedTuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.ndimage import gaussian_filter

from . import trace

MSCN_SIGMA = 7.0 / 6.0
# Four neighbour orientations for the paired-product moments: horizontal, vertical, both diagonals.
SHIFTS: tuple[tuple[int, int], ...] = ((0, 1), (1, 0), (1, 1), (1, -1))


def as_gray(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=float)
    if img.ndim != 2 or img.size == 0:
        raise ValueError("gray image must be a non-empty 2-D array")
    if not np.all(np.isfinite(img)):
        raise ValueError("gray image contains non-finite values")
    return img


def mscn(image: np.ndarray, c: float = 1e-3) -> np.ndarray:
    """Mean subtracted contrast normalised coefficients over a 7x7 Gaussian window."""
    if c <= 0:
        raise ValueError("normalisation constant must be positive")
    img = as_gray(image)
    truncate = 3.0 / MSCN_SIGMA
    mu = gaussian_filter(img, MSCN_SIGMA, truncate=truncate, mode="reflect")
    var = gaussian_filter(img * img, MSCN_SIGMA, truncate=truncate, mode="reflect") - mu * mu
    return (img - mu) / (np.sqrt(np.maximum(var, 0.0)) + c)


def _moments(values: np.ndarray) -> list[float]:
    v = values.ravel()
    return [float(v.mean()), float(v.var())]


def patch_features(coefficients: np.ndarray) -> np.ndarray:
    """Moment features of one MSCN patch: mean, variance, third and fourth raw moments, then
    mean and variance of the neighbour products in each orientation."""
    m = coefficients
    feats = [float(m.mean()), float(m.var()), float(np.mean(m**3)), float(np.mean(m**4))]
    h, w = m.shape
    for di, dj in SHIFTS:
        a = m[: h - di, max(0, -dj) : w - max(0, dj)]
        b = m[di:, max(0, dj) : w - max(0, -dj)]
        feats += _moments(a * b)
    return np.asarray(feats)


def image_features(image: np.ndarray, patch_size: int = 32, c: float = 1e-3) -> np.ndarray:
    """Per-patch feature rows over the non-overlapping patches that fit in the image."""
    img = as_gray(image)
    h, w = img.shape
    if h < patch_size or w < patch_size:
        raise ValueError(f"image {w}x{h} is smaller than the {patch_size} px patch")
    coeff = mscn(img, c)
    rows = []
    for i in range(0, h - patch_size + 1, patch_size):
        for j in range(0, w - patch_size + 1, patch_size):
            rows.append(patch_features(coeff[i : i + patch_size, j : j + patch_size]))
    return np.vstack(rows)


class NsModel(BaseModel):
    """Natural-scene feature statistics: mean vector and covariance."""

    mu: list[float]
    sigma: list[list[float]]
    patch_size: int = Field(32, ge=8)
    c: float = Field(1e-3, gt=0)

    model_config = ConfigDict(extra="forbid")

    @property
    def mean(self) -> np.ndarray:
        return np.asarray(self.mu, dtype=float)

    @property
    def covariance(self) -> np.ndarray:
        cov = np.asarray(self.sigma, dtype=float)
        if cov.shape != (len(self.mu), len(self.mu)):
            raise ValueError("model covariance does not match the feature dimension")
        return cov

    def save(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> NsModel:
        return cls.model_validate_json(path.read_text(encoding="utf-8"))


def render_surface(rng: np.random.Generator, size: int = 96) -> np.ndarray:
    """Synthetic sharp capture of a concrete-like surface: shading, grain and a few dark cracks."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    g = rng.uniform(-0.15, 0.15, 2)
    shade = 0.5 + g[0] * (xx - 0.5) + g[1] * (yy - 0.5)
    grain = gaussian_filter(rng.normal(0.0, 1.0, (size, size)), 0.7)
    grain = 0.08 * grain / (grain.std() + 1e-12)
    img = shade + grain + rng.normal(0.0, 0.02, (size, size))
    for _ in range(rng.integers(1, 4)):
        p0 = rng.uniform(0, size, 2)
        angle = rng.uniform(0.0, math.pi)
        t = np.linspace(-size, size, 4 * size)
        pts = np.round(p0 + t[:, None] * np.array([math.cos(angle), math.sin(angle)])).astype(int)
        ok = np.all((pts >= 0) & (pts < size), axis=1)
        img[pts[ok, 0], pts[ok, 1]] -= rng.uniform(0.15, 0.3)
    return np.clip(img, 0.0, 1.0)


def fit_model(images: list[np.ndarray] | None = None, *, patches: int = 500, patch_size: int = 32, c: float = 1e-3, seed: int = 0) -> NsModel:
    """Fit feature statistics to ``patches`` patches of clean images (synthetic renders by default)."""
    rng = np.random.default_rng(seed)
    rows: list[np.ndarray] = []
    source = list(images or [])
    k = 0
    while sum(len(r) for r in rows) < patches:
        img = source[k] if k < len(source) else render_surface(rng, 3 * patch_size)
        rows.append(image_features(img, patch_size, c))
        k += 1
    feats = np.vstack(rows)[:patches]
    trace.debug(f"natural scene model from {len(feats)} patches")
    return NsModel(mu=feats.mean(axis=0).tolist(), sigma=np.cov(feats, rowvar=False).tolist(), patch_size=patch_size, c=c)


def default_model(
    path: Path,
    *,
    store: Path | None = None,
    refit: bool = False,
    seed: int = 0,
    patch_size: int = 32,
    c: float = 1e-3,
) -> NsModel:
    """Load the model at ``path``; when it is missing, stale or ``refit`` is set, fit one and save it to ``store``.

    ``store`` defaults to ``path``. A model read from ``path`` is never rewritten in place when
    ``store`` points elsewhere.
    """
    if path.exists() and not refit:
        model = NsModel.load(path)
        if model.patch_size == patch_size and math.isclose(model.c, c):
            return model
        trace.warn(f"stored quality model uses {model.patch_size} px patches and c={model.c:g}, refitting")
    model = fit_model(patch_size=patch_size, c=c, seed=seed)
    target = store or path
    model.save(target)
    trace.debug(f"natural scene model written to {target}")
    return model


def niqe_distance(features: np.ndarray, model: NsModel, ridge: float = 1e-6) -> float:
    """Mahalanobis distance of a feature vector to the model."""
    d = np.asarray(features, dtype=float).ravel() - model.mean
    cov = model.covariance + ridge * np.eye(len(d))
    try:
        chol = cho_factor(cov)
    except LinAlgError as exc:
        raise ValueError("model covariance is singular") from exc
    return float(math.sqrt(max(0.0, float(d @ cho_solve(chol, d)))))


def niqe(image: np.ndarray, model: NsModel) -> float:
    feats = image_features(image, model.patch_size, model.c)
    return niqe_distance(feats.mean(axis=0), model)


def niqe_normalize(score: float, score_min: float, score_max: float) -> float:
    if not score_max > score_min:
        raise ValueError("normalisation needs max > min")
    return float(np.clip((score - score_min) / (score_max - score_min), 0.0, 1.0))


class QualityScore(NamedTuple):
    name: str
    niqe: float
    niqe_norm: float
    kept: bool


def filter_dataset(images: Mapping[str, np.ndarray], model: NsModel, s_dis: float) -> list[QualityScore]:
    """Score a batch and reject images whose batch-normalised NIQE exceeds ``s_dis``."""
    if not 0 < s_dis <= 1:
        raise ValueError("rejection threshold must lie in (0, 1]")
    scores = {name: niqe(img, model) for name, img in images.items()}
    if len(scores) == 1:
        trace.warn("quality batch of one image, kept without filtering")
        return [QualityScore(name, s, 0.0, True) for name, s in scores.items()]
    if not scores:
        return []
    lo, hi = min(scores.values()), max(scores.values())
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        trace.warn("quality batch has identical scores, all kept")
        return [QualityScore(name, s, 0.0, True) for name, s in scores.items()]
    out = []
    for name, s in scores.items():
        norm = niqe_normalize(s, lo, hi)
        out.append(QualityScore(name, s, norm, norm <= s_dis))
    trace.debug(f"quality filter kept {sum(q.kept for q in out)}/{len(out)}")
    return out


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB on the [0, 1] range; identical images give ``inf``."""
    x, y = as_gray(a), as_gray(b)
    if x.shape != y.shape:
        raise ValueError(f"image sizes differ: {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


__all__ = [
    "NsModel",
    "QualityScore",
    "as_gray",
    "default_model",
    "filter_dataset",
    "fit_model",
    "image_features",
    "mscn",
    "niqe",
    "niqe_distance",
    "niqe_normalize",
    "patch_features",
    "psnr",
    "render_surface",
]
