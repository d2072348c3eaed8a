"""
Quality Service - no-reference image quality.
BRISQUE-style natural-scene statistics (MSCN coefficients, GGD/AGGD fits at two scales)
scored as a distance to statistics fitted on clean reconstructions.
"""
from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy import ndimage
from scipy.special import gamma
from skimage.transform import rescale

from app.core.errors import DataError, ShapeError
from app.core.logger import logger
from app.services import storage_service

N_FEATURES = 36
EPS = 1e-7
RIDGE = 1e-6

_GAM = np.arange(0.2, 10.001, 0.001)
_R_GGD = gamma(1.0 / _GAM) * gamma(3.0 / _GAM) / gamma(2.0 / _GAM) ** 2
_R_AGGD = gamma(2.0 / _GAM) ** 2 / (gamma(1.0 / _GAM) * gamma(3.0 / _GAM))


def gaussian_window(size: int = 7, sigma: float = 7.0 / 6.0) -> np.ndarray:
    Y, X = np.indices((size, size)) - size // 2
    kernel = np.exp(-(X ** 2 + Y ** 2) / (2 * sigma ** 2))
    return kernel / kernel.sum()


def mscn(image: np.ndarray) -> np.ndarray:
    """Mean-subtracted contrast-normalized coefficients; EPS keeps flat regions at 0."""
    kernel = gaussian_window()
    mu = ndimage.correlate(image, kernel, mode="reflect")
    second = ndimage.correlate(image * image, kernel, mode="reflect")
    sigma = np.sqrt(np.abs(second - mu * mu))
    return (image - mu) / (sigma + EPS)


def ggd_fit(x: np.ndarray):
    """Shape and variance of a symmetric generalized Gaussian, by grid search."""
    var = np.mean(x ** 2)
    rho = var / (np.mean(np.abs(x)) ** 2 + EPS)
    alpha = _GAM[np.argmin(np.abs(rho - _R_GGD))]
    return alpha, var


def aggd_fit(x: np.ndarray):
    """Shape, mean and left/right variances of an asymmetric generalized Gaussian."""
    left = x[x < 0]
    right = x[x > 0]
    left_std = np.sqrt(np.mean(left ** 2)) if left.size else 0.0
    right_std = np.sqrt(np.mean(right ** 2)) if right.size else 0.0
    gamma_hat = left_std / (right_std + EPS)
    r_hat = np.mean(np.abs(x)) ** 2 / (np.mean(x ** 2) + EPS)
    r_norm = r_hat * (gamma_hat ** 3 + 1) * (gamma_hat + 1) / ((gamma_hat ** 2 + 1) ** 2)
    upsilon = _GAM[np.argmin((_R_AGGD - r_norm) ** 2)]
    const = np.sqrt(gamma(1.0 / upsilon) / gamma(3.0 / upsilon))
    eta = (right_std - left_std) * (gamma(2.0 / upsilon) / gamma(1.0 / upsilon)) * const
    return upsilon, eta, left_std ** 2, right_std ** 2


def scale_features(image: np.ndarray) -> np.ndarray:
    m = mscn(image)
    alpha, var = ggd_fit(m)
    products = (
        m[:, :-1] * m[:, 1:],      # horizontal
        m[:-1, :] * m[1:, :],      # vertical
        m[:-1, :-1] * m[1:, 1:],   # main diagonal
        m[1:, :-1] * m[:-1, 1:],   # anti-diagonal
    )
    feats = [alpha, var]
    for p in products:
        feats.extend(aggd_fit(p))
    return np.asarray(feats, dtype=np.float64)


def brisque_features(image: np.ndarray) -> np.ndarray:
    """36 features: 18 at full resolution, 18 after 2x bicubic downscale."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or min(image.shape) < 8:
        raise ShapeError(f"quality features need a 2-D image of at least 8x8, got {image.shape}")
    if not np.all(np.isfinite(image)):
        raise DataError("quality features need a finite image")
    half = rescale(image, 0.5, order=3, anti_aliasing=True)
    return np.concatenate([scale_features(image), scale_features(half)])


@dataclass(eq=False)
class QualityModel:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        if self.mean.shape != (N_FEATURES,) or self.cov.shape != (N_FEATURES, N_FEATURES):
            raise ShapeError(f"quality model must hold {N_FEATURES} features")
        self._precision = np.linalg.inv(self.cov + RIDGE * np.eye(N_FEATURES))

    def distance2(self, features: np.ndarray) -> float:
        diff = features - self.mean
        return float(max(diff @ self._precision @ diff, 0.0))

    def save(self, path):
        storage_service.write_quality_stats(path, self.mean, self.cov)

    @classmethod
    def load(cls, path) -> "QualityModel":
        mean, cov = storage_service.read_quality_stats(path)
        return cls(mean=mean, cov=cov)


class QualityService:
    """Fits pristine statistics and scores images against them."""

    def fit(self, images: Iterable[np.ndarray]) -> QualityModel:
        """
        The stored covariance is scaled so that the 95th percentile of corpus
        distances maps to Q = 100.
        """
        feats = np.stack([brisque_features(im) for im in images])
        if feats.shape[0] < 2:
            raise DataError("quality model needs at least two corpus images")
        mean = feats.mean(axis=0)
        cov = np.cov(feats, rowvar=False, bias=True)
        cov = 0.5 * (cov + cov.T)

        raw = QualityModel(mean=mean, cov=cov)
        d2 = np.array([raw.distance2(f) for f in feats])
        level = float(np.percentile(d2, 95))
        if level <= 0:
            level = 1.0
        model = QualityModel(mean=mean, cov=cov * level)
        logger.info(f"Fitted quality model on {feats.shape[0]} images (95th pct distance^2 {level:.4g})")
        return model

    def score(self, image: np.ndarray, model: QualityModel) -> float:
        return 100.0 * np.sqrt(model.distance2(brisque_features(image)))


def quality_score(image: np.ndarray, model: QualityModel) -> float:
    return QualityService().score(image, model)
