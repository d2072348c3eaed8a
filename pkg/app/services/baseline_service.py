"""
Baseline Service - classical sinogram completion.
Per radial column, missing angles are filled from the valid angles around them. The angle
axis is continued past pi with the mirrored radial column, since bin (a + D, s) is bin (a, 2D - s).
"""
from typing import Optional

import numpy as np

from app.core.errors import BaselineError, ShapeError


def _fill_column(angles_known, values_known, angles_missing, period, kind):
    if kind == "nearest":
        dist = np.abs(angles_missing[:, None] - angles_known[None, :])
        dist = np.minimum(dist, period - dist)
        return values_known[np.argmin(dist, axis=1)]
    xp = np.concatenate([angles_known - period, angles_known, angles_known + period])
    fp = np.tile(values_known, 3)
    return np.interp(angles_missing, xp, fp)


def interpolate_sinogram_baseline(sinogram: np.ndarray, bin_mask: np.ndarray,
                                  reachable: Optional[np.ndarray] = None,
                                  kind: str = "linear") -> np.ndarray:
    """
    Fill invalid bins along the angle axis.

    Args:
        sinogram: (D, 2D+1) masked sinogram.
        bin_mask: validity mask of the same shape; valid bins are returned untouched.
        reachable: bins that can hold data at all; unreachable bins are neither used nor filled.
        kind: "linear" (default) or "nearest".

    Returns:
        Completed sinogram.
    """
    sinogram = np.asarray(sinogram, dtype=np.float64)
    bin_mask = np.asarray(bin_mask, dtype=bool)
    if sinogram.shape != bin_mask.shape or sinogram.ndim != 2:
        raise ShapeError(f"sinogram {sinogram.shape} and mask {bin_mask.shape} must be equal 2-D shapes")
    reach = np.ones_like(bin_mask) if reachable is None else np.asarray(reachable, dtype=bool)

    known = reach & bin_mask
    missing = reach & ~bin_mask
    if not np.any(known):
        raise BaselineError("sinogram has no valid bins to interpolate from")

    out = sinogram.copy()
    n_angles, n_radial = sinogram.shape
    for s in np.flatnonzero(missing.any(axis=0)):
        mirror = n_radial - 1 - s
        a_known = np.flatnonzero(known[:, s])
        a_turned = np.flatnonzero(known[:, mirror])
        a_missing = np.flatnonzero(missing[:, s])
        if a_known.size + a_turned.size == 0:
            out[a_missing, s] = 0.0
            continue
        # one full turn of the LOR normal: [0, pi) from column s, [pi, 2 pi) from its mirror
        angles = np.concatenate([a_known, a_turned + n_angles]).astype(float)
        values = np.concatenate([sinogram[a_known, s], sinogram[a_turned, mirror]])
        out[a_missing, s] = _fill_column(angles, values, a_missing.astype(float), 2.0 * n_angles, kind)
    return out


def interpolate_volume(sinograms: np.ndarray, bin_masks: np.ndarray, reachable: Optional[np.ndarray] = None,
                       kind: str = "linear") -> np.ndarray:
    return np.stack([interpolate_sinogram_baseline(s, m, reachable, kind) for s, m in zip(sinograms, bin_masks)])
