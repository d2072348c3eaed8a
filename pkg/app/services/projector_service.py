"""
Projector Service - ray weights between crystal centers.
Joseph-style traversal: one sample per column (or row) along the dominant axis,
linear interpolation across the other axis.
"""
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from app.core.errors import ConfigError
from app.core.logger import logger
from app.services.geometry_service import ScannerGeometry, crystal_xy, pair_table


def _check_fov(geom: ScannerGeometry, size: int, voxel_mm: float):
    half_diag = size * voxel_mm / 2.0 * np.sqrt(2.0)
    if half_diag >= geom.radius_mm:
        raise ConfigError(f"image grid ({size} x {voxel_mm} mm) does not fit inside the ring")


def _dominant_entries(p0, p1, size, voxel_mm, along_x: bool):
    """Entries for rays whose dominant direction is x (or y when along_x is False)."""
    n_rays = p0.shape[0]
    if n_rays == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, np.zeros(0)

    major, minor = (0, 1) if along_x else (1, 0)
    d = p1 - p0
    length = np.hypot(d[:, 0], d[:, 1])
    centers = (np.arange(size) - (size - 1) / 2.0) * voxel_mm

    t = (centers[None, :] - p0[:, major, None]) / d[:, major, None]
    minor_pos = p0[:, minor, None] + t * d[:, minor, None]
    frac = minor_pos / voxel_mm + (size - 1) / 2.0
    lo = np.floor(frac).astype(np.int64)
    w_hi = frac - lo
    step = (voxel_mm * length / np.abs(d[:, major]))[:, None]

    ray = np.broadcast_to(np.arange(n_rays)[:, None], lo.shape)
    major_idx = np.broadcast_to(np.arange(size)[None, :], lo.shape)

    rows, cols, vals = [], [], []
    for minor_idx, weight in ((lo, 1.0 - w_hi), (lo + 1, w_hi)):
        ok = (minor_idx >= 0) & (minor_idx < size) & (weight > 0)
        if along_x:
            pixel = minor_idx * size + major_idx
        else:
            pixel = major_idx * size + minor_idx
        rows.append(ray[ok])
        cols.append(pixel[ok])
        vals.append((weight * step)[ok])
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)


def ray_matrix(geom: ScannerGeometry, size: int, voxel_mm: float, i, j) -> sp.csr_matrix:
    """Line-integral weights (mm) for the LORs (i[k], j[k]) over a size x size grid."""
    _check_fov(geom, size, voxel_mm)
    xy = crystal_xy(geom)
    p0 = xy[np.asarray(i)]
    p1 = xy[np.asarray(j)]
    d = np.abs(p1 - p0)
    x_major = d[:, 0] >= d[:, 1]

    rows, cols, vals = [], [], []
    for along_x, sel in ((True, x_major), (False, ~x_major)):
        idx = np.flatnonzero(sel)
        r, c, v = _dominant_entries(p0[idx], p1[idx], size, voxel_mm, along_x)
        rows.append(idx[r])
        cols.append(c)
        vals.append(v)
    n = p0.shape[0]
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(n, size * size))


@lru_cache(maxsize=4)
def system_matrix(geom: ScannerGeometry, size: int, voxel_mm: float) -> sp.csr_matrix:
    """Geometric pair-by-voxel matrix for all transaxial pairs i < j."""
    pairs = pair_table(geom)
    G = ray_matrix(geom, size, voxel_mm, pairs.i, pairs.j)
    logger.info(f"Built ray matrix: {G.shape[0]} pairs x {size}x{size} voxels, nnz={G.nnz}")
    return G


@lru_cache(maxsize=4)
def bin_matrix(geom: ScannerGeometry) -> sp.csr_matrix:
    """Sparse aggregation from crystal pairs onto flattened (angle, radial) bins."""
    pairs = pair_table(geom)
    flat = pairs.angle * geom.radial_bins + pairs.radial
    n_bins = geom.angle_bins * geom.radial_bins
    return sp.csr_matrix((np.ones(flat.size), (flat, np.arange(flat.size))), shape=(n_bins, flat.size))


class ProjectorService:
    """Forward/back projection of images through the pair geometry of one scanner."""

    def __init__(self, geom: ScannerGeometry, size: int, voxel_mm: float):
        self.geom = geom
        self.size = size
        self.voxel_mm = voxel_mm
        self.G = system_matrix(geom, size, voxel_mm)
        self.B = bin_matrix(geom)

    def line_integrals(self, image: np.ndarray) -> np.ndarray:
        return self.G @ np.asarray(image, dtype=np.float64).ravel()

    def crosses_fov(self) -> np.ndarray:
        return np.asarray(self.G.sum(axis=1)).ravel() > 0

    def to_sinogram(self, pair_values: np.ndarray) -> np.ndarray:
        return (self.B @ pair_values).reshape(self.geom.sinogram_shape)
