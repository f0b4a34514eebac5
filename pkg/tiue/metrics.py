"""
Sample-set quality metrics over image embeddings: a Frechet distance between Gaussian fits,
k-nearest-neighbour precision / recall / density / coverage, and normality of predicted noise.
"""
from typing import Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from scipy.spatial.distance import cdist

from .autograd import Tensor, no_grad
from .constant import VARIANCE_FLOOR
from .errors import DimMismatch, InvalidAttr, KTooLarge, RankDeficient
from .logs import error_and_raise, logger
from .models.config_models import EmbeddingKind
from .models.report_models import MetricsReport, NoiseStats

POOLED_MAX_DIM = 128
EMBED_BATCH = 64


class FeatureSet(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    features: np.ndarray  # (n, d)
    provenance: str = "real"
    kind: EmbeddingKind = EmbeddingKind.FLAT_PIXELS

    @model_validator(mode="after")
    def check_matrix(self) -> "FeatureSet":
        assert self.features.ndim == 2 and self.features.shape[0] >= 1, \
            f"features must be a non-empty (n, d) matrix, got {self.features.shape}"
        assert self.provenance in ("real", "generated")
        return self

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2.0)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_proxy(real: FeatureSet, fake: FeatureSet) -> float:
    """||mu_r - mu_f||^2 + tr(S_r + S_f - 2 (S_r S_f)^(1/2))."""
    if real.d != fake.d:
        error_and_raise(f"feature dims differ: {real.d} vs {fake.d}", DimMismatch)
    for fs in (real, fake):
        if fs.n < fs.d + 1:
            error_and_raise(f"{fs.n} {fs.provenance} samples cannot give a full-rank covariance in {fs.d} dims",
                            RankDeficient)
    xr, xf = real.features.astype(np.float64), fake.features.astype(np.float64)
    mu_r, mu_f = xr.mean(axis=0), xf.mean(axis=0)
    cov_r = np.atleast_2d(np.cov(xr, rowvar=False))
    cov_f = np.atleast_2d(np.cov(xf, rowvar=False))

    # (S_r S_f)^(1/2) has the same trace as (s S_f s)^(1/2) with s = S_r^(1/2), which is symmetric
    s = _sqrt_psd(cov_r)
    m = s @ cov_f @ s
    eig = np.linalg.eigvalsh((m + m.T) / 2.0)
    tr_sqrt = float(np.sqrt(np.clip(eig, 0.0, None)).sum())

    value = float(np.sum((mu_r - mu_f) ** 2) + np.trace(cov_r) + np.trace(cov_f) - 2.0 * tr_sqrt)
    return max(value, 0.0)


def _check_k(real: FeatureSet, fake: FeatureSet, k: int):
    if real.d != fake.d:
        error_and_raise(f"feature dims differ: {real.d} vs {fake.d}", DimMismatch)
    if not 1 <= k < min(real.n, fake.n):
        error_and_raise(f"k={k} must satisfy 1 <= k < min({real.n}, {fake.n})", KTooLarge)


def knn_radii(x: np.ndarray, k: int) -> np.ndarray:
    """Distance from every row to its k-th nearest other row."""
    d = np.sort(cdist(x, x, metric="euclidean"), axis=1)
    return d[:, k]  # column 0 is the point itself


def precision_recall(real: FeatureSet, fake: FeatureSet, k: int = 3) -> Tuple[float, float]:
    _check_k(real, fake, k)
    r_real, r_fake = knn_radii(real.features, k), knn_radii(fake.features, k)
    d = cdist(real.features, fake.features, metric="euclidean")  # (n_real, n_fake)
    precision = float(np.mean(np.any(d <= r_real[:, None], axis=0)))
    recall = float(np.mean(np.any(d <= r_fake[None, :], axis=1)))
    return precision, recall


def density_coverage(real: FeatureSet, fake: FeatureSet, k: int = 3) -> Tuple[float, float]:
    _check_k(real, fake, k)
    r_real = knn_radii(real.features, k)
    d = cdist(real.features, fake.features, metric="euclidean")
    inside = d <= r_real[:, None]
    density = float(inside.sum() / (k * fake.n))
    coverage = float(np.mean(d.min(axis=1) <= r_real))
    return density, coverage


def f1_score(precision: float, recall: float) -> float:
    return 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)


def normality_stats(eps) -> NoiseStats:
    """
    Mean, variance and excess kurtosis of all elements. The KL is the distillation KL term: moments per
    item along axis 0 (a 1-d input is one item), clamped at VARIANCE_FLOOR, averaged over items.
    """
    from .diffusion.distill import moment_kl

    arr = np.asarray(eps.data if isinstance(eps, Tensor) else eps, dtype=np.float64)
    if arr.size == 0:
        error_and_raise("normality_stats needs a non-empty tensor", InvalidAttr)
    items = arr.reshape(1, -1) if arr.ndim < 2 else arr
    with no_grad():
        item_kl, _, item_var = moment_kl(Tensor(items))
    x = arr.reshape(-1)
    mean = float(x.mean())
    var = float(np.mean(x ** 2) - mean ** 2)
    degenerate = var < VARIANCE_FLOOR or bool(np.any(item_var < VARIANCE_FLOOR))
    kurt = float(np.mean((x - mean) ** 4) / var ** 2 - 3.0) if var >= VARIANCE_FLOOR else 0.0
    kl = float(item_kl.data.mean())
    if degenerate:
        logger.warning("Noise tensor has (near) zero variance")
    return NoiseStats(mean=mean, var=max(var, 0.0), excess_kurtosis=kurt, kl=float(kl), degenerate=degenerate,
                      count=int(x.size))


def _as_float_images(images: np.ndarray) -> np.ndarray:
    """uint8 (N, H, W, 3) or float (N, 3, H, W) -> float64 (N, 3, H, W) in [-1, 1]."""
    from .diffusion.sampler import from_pixels

    images = np.asarray(images)
    if images.dtype == np.uint8:
        return from_pixels(images, dtype=np.float64)
    return images.astype(np.float64)


def embed_images(images: np.ndarray, kind: EmbeddingKind | str = EmbeddingKind.FLAT_PIXELS, teacher=None,
                 provenance: str = "real") -> FeatureSet:
    from .diffusion.unet import encode

    kind = EmbeddingKind(kind)
    x = _as_float_images(images)
    if kind == EmbeddingKind.FLAT_PIXELS:
        feats = x.reshape(len(x), -1)
    elif kind == EmbeddingKind.POOLED:
        while x[0].size > POOLED_MAX_DIM and x.shape[2] % 2 == 0 and x.shape[3] % 2 == 0:
            b, c, h, w = x.shape
            x = x.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
        feats = x.reshape(len(x), -1)
    else:
        if teacher is None:
            error_and_raise("teacher-encoder embedding needs a teacher checkpoint", InvalidAttr)
        chunks = []
        with no_grad():
            for start in range(0, len(x), EMBED_BATCH):
                batch = x[start:start + EMBED_BATCH].astype(teacher.dtype)
                cond = np.zeros((len(batch), teacher.config.cond_dim), dtype=teacher.dtype)
                mid = encode(teacher, batch, 0, cond).mid.data
                chunks.append(mid.mean(axis=(2, 3)))
        feats = np.concatenate(chunks).astype(np.float64)
    return FeatureSet(features=feats, provenance=provenance, kind=kind)


def evaluate(real: FeatureSet, fake: FeatureSet, k: int = 3, noise: NoiseStats | None = None) -> MetricsReport:
    precision, recall = precision_recall(real, fake, k)
    density, coverage = density_coverage(real, fake, k)
    return MetricsReport(
        frechet=frechet_proxy(real, fake),
        precision=precision, recall=recall, f1=f1_score(precision, recall),
        density=density, coverage=coverage,
        k=k, n_real=real.n, n_fake=fake.n, embedding=real.kind.value, noise=noise,
    )
