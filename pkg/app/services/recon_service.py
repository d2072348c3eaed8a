"""
Recon Service - tomographic operators and solvers.
Matched projector/backprojector pair, OSEM/MLEM with interleaved angle subsets, and an FBP baseline.
"""
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np
import scipy.sparse as sp
from scipy.signal import fftconvolve

from app.core.errors import ConfigError, DegenerateModelError, ShapeError
from app.core.logger import logger
from app.services.geometry_service import ScannerGeometry, reachable_bins
from app.services.projector_service import bin_matrix, system_matrix


@dataclass(eq=False)
class SystemModel:
    """Rows are the reachable, valid sinogram bins of one slice; columns are voxels."""
    geom: ScannerGeometry
    size: int
    voxel_mm: float
    rows: np.ndarray
    A: sp.csr_matrix
    bin_mask: np.ndarray
    factor_sum: np.ndarray

    @property
    def row_angles(self) -> np.ndarray:
        return self.rows // self.geom.radial_bins

    def _check_image(self, x: np.ndarray):
        if x.shape != (self.size, self.size):
            raise ShapeError(f"image {x.shape} does not match model grid ({self.size}, {self.size})")

    def _check_sinogram(self, y: np.ndarray):
        if y.shape != self.geom.sinogram_shape:
            raise ShapeError(f"sinogram {y.shape} does not match model grid {self.geom.sinogram_shape}")

    def project(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        self._check_image(x)
        y = np.zeros(self.geom.angle_bins * self.geom.radial_bins)
        y[self.rows] = self.A @ x.ravel()
        return y.reshape(self.geom.sinogram_shape)

    def backproject(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        self._check_sinogram(y)
        return (self.A.T @ y.ravel()[self.rows]).reshape(self.size, self.size)

    def gather(self, y: np.ndarray) -> np.ndarray:
        self._check_sinogram(np.asarray(y))
        return np.asarray(y, dtype=np.float64).ravel()[self.rows]


def build_system_model(geom: ScannerGeometry, size: int, voxel_mm: float,
                       bin_mask: Optional[np.ndarray] = None,
                       pair_weights: Optional[np.ndarray] = None) -> SystemModel:
    """
    Fold per-pair factors (efficiency, attenuation, scale) into A = Bins * diag(w) * G.

    Args:
        bin_mask: (D, 2D+1) validity mask; invalid bins are dropped from the model.
        pair_weights: per-pair multiplicative factors; ones when omitted.
    """
    G = system_matrix(geom, size, voxel_mm)
    B = bin_matrix(geom)
    w = np.ones(G.shape[0]) if pair_weights is None else np.asarray(pair_weights, dtype=np.float64)
    if w.shape != (G.shape[0],):
        raise ShapeError(f"pair weights {w.shape} do not match {G.shape[0]} pairs")

    valid = reachable_bins(geom) if bin_mask is None else (reachable_bins(geom) & bin_mask)
    rows = np.flatnonzero(valid.ravel())
    weighted_bins = (B @ sp.diags(w)).tocsr()
    A = (weighted_bins[rows] @ G).tocsr()
    factor_sum = (B @ w).reshape(geom.sinogram_shape)
    mask = np.ones(geom.sinogram_shape, dtype=bool) if bin_mask is None else bin_mask.copy()
    return SystemModel(geom=geom, size=size, voxel_mm=voxel_mm, rows=rows, A=A,
                       bin_mask=mask, factor_sum=factor_sum)


def poisson_log_likelihood(y: np.ndarray, ybar: np.ndarray) -> float:
    """sum(y log ybar - ybar), with 0 log 0 = 0."""
    y = np.asarray(y, dtype=np.float64)
    ybar = np.asarray(ybar, dtype=np.float64)
    pos = y > 0
    if np.any(ybar[pos] <= 0):
        return -np.inf
    return float(np.sum(y[pos] * np.log(ybar[pos])) - np.sum(ybar))


class ReconService:
    """OSEM/MLEM solver over a SystemModel."""

    def __init__(self, model: SystemModel):
        self.model = model

    def subsets(self, n_subsets: int) -> List[np.ndarray]:
        D = self.model.geom.angle_bins
        if not 1 <= n_subsets <= D:
            raise ConfigError(f"n_subsets must be in [1, {D}], got {n_subsets}")
        angles = self.model.row_angles
        return [np.flatnonzero(angles % n_subsets == k) for k in range(n_subsets)]

    def osem_reconstruct(self, y: np.ndarray, n_subsets: int = 7, n_iters: int = 10,
                         x0: Optional[np.ndarray] = None, background: Optional[np.ndarray] = None,
                         callback: Optional[Callable[[int, np.ndarray], None]] = None) -> np.ndarray:
        """
        Multiplicative EM update per subset:
            x <- x / (A_s^T 1) * A_s^T (y_s / (A_s x + b_s))

        Voxels with zero subset sensitivity are set to zero.
        """
        model = self.model
        index_sets = self.subsets(n_subsets)
        y_rows = model.gather(y)
        b_rows = np.zeros_like(y_rows) if background is None else model.gather(background)

        blocks = [model.A[idx] for idx in index_sets]
        sens = [np.asarray(Ak.sum(axis=0)).ravel() for Ak in blocks]
        total_sens = np.sum(sens, axis=0)
        if not np.any(total_sens > 0):
            raise DegenerateModelError("sensitivity image is zero everywhere")

        if x0 is None:
            level = y_rows.sum() / total_sens.sum()
            x = np.full(total_sens.shape, level if level > 0 else 1.0)
        else:
            x = np.asarray(x0, dtype=np.float64).ravel().copy()
            if x.shape != total_sens.shape:
                raise ShapeError(f"x0 has {x.size} voxels, model has {total_sens.size}")
        x[total_sens == 0] = 0.0

        for it in range(n_iters):
            for Ak, idx, sk in zip(blocks, index_sets, sens):
                ybar = Ak @ x + b_rows[idx]
                ratio = np.divide(y_rows[idx], ybar, out=np.zeros_like(ybar), where=ybar > 0)
                update = Ak.T @ ratio
                x = np.where(sk > 0, x * np.divide(update, sk, out=np.zeros_like(sk), where=sk > 0), 0.0)
            if callback is not None:
                callback(it, x.reshape(model.size, model.size))
            logger.debug(f"OSEM iteration {it + 1}/{n_iters} done")
        return x.reshape(model.size, model.size)

    def mlem_reconstruct(self, y: np.ndarray, n_iters: int = 50, **kwargs) -> np.ndarray:
        return self.osem_reconstruct(y, n_subsets=1, n_iters=n_iters, **kwargs)

    def log_likelihood(self, y: np.ndarray, x: np.ndarray, background: Optional[np.ndarray] = None) -> float:
        ybar = self.model.A @ np.asarray(x, dtype=np.float64).ravel()
        if background is not None:
            ybar = ybar + self.model.gather(background)
        return poisson_log_likelihood(self.model.gather(y), ybar)


def ramp_kernel(n_radial: int, tau: float) -> np.ndarray:
    """Spatial Ram-Lak kernel sampled at spacing tau, centered, length 2*n_radial - 1."""
    n = np.arange(-(n_radial - 1), n_radial)
    h = np.zeros(n.shape)
    h[n == 0] = 1.0 / (4.0 * tau ** 2)
    odd = n % 2 == 1
    h[odd] = -1.0 / (np.pi * n[odd] * tau) ** 2
    return h


def fbp_reconstruct(y: np.ndarray, model: SystemModel) -> np.ndarray:
    """
    Filtered backprojection on the model's image grid.

    Bins are first divided by their summed pair factors, then each angle row is
    resampled from its reachable radial positions onto the uniform radial grid.
    """
    geom = model.geom
    y = np.asarray(y, dtype=np.float64)
    if y.shape != geom.sinogram_shape:
        raise ShapeError(f"sinogram {y.shape} does not match {geom.sinogram_shape}")

    D, S = geom.angle_bins, geom.radial_bins
    tau = geom.radius_mm / D
    s_grid = (np.arange(S) - D) * tau
    reach = reachable_bins(geom)
    corrected = np.divide(y, model.factor_sum, out=np.zeros_like(y), where=model.factor_sum > 0)

    resampled = np.zeros_like(corrected)
    for a in range(D):
        pos = np.flatnonzero(reach[a])
        if pos.size:
            resampled[a] = np.interp(s_grid, s_grid[pos], corrected[a, pos], left=0.0, right=0.0)

    kernel = ramp_kernel(S, tau)
    filtered = tau * fftconvolve(resampled, kernel[None, :], mode="same", axes=1)

    c = (np.arange(model.size) - (model.size - 1) / 2.0) * model.voxel_mm
    yy, xx = np.meshgrid(c, c, indexing="ij")
    image = np.zeros((model.size, model.size))
    for a in range(D):
        phi = np.pi * a / D
        s = xx * np.cos(phi) + yy * np.sin(phi)
        image += np.interp(s.ravel(), s_grid, filtered[a], left=0.0, right=0.0).reshape(image.shape)
    return image * (np.pi / D)
