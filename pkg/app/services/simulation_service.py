"""
Simulation Service - pair-driven emission simulation.
Expected coincidence rates per crystal pair, Poisson sampling, listmode and sinogram binning.
"""
from typing import Optional

import numpy as np

from app.core.errors import DataError, ShapeError
from app.core.logger import logger
from app.services.geometry_service import (
    DetectorMask, ScannerGeometry, active_pairs, lor_bins, pair_table,
)
from app.services.projector_service import ProjectorService

LISTMODE_DTYPE = np.uint16


def sample_efficiencies(geom: ScannerGeometry, seed: int, spread: float = 0.10) -> np.ndarray:
    """Per-crystal efficiency factors ~ Normal(1, spread), redrawn below 0.5. Shape (R, D)."""
    shape = (geom.num_rings, geom.crystals_per_ring)
    if spread == 0:
        return np.ones(shape)
    rng = np.random.default_rng(seed)
    eff = rng.normal(1.0, spread, size=shape)
    low = eff < 0.5
    while np.any(low):
        eff[low] = rng.normal(1.0, spread, size=int(low.sum()))
        low = eff < 0.5
    return eff


def pair_counts_to_events(geom: ScannerGeometry, counts: np.ndarray) -> np.ndarray:
    """Expand (R*R, P) pair counts into listmode records (ring_a, crystal_a, ring_b, crystal_b)."""
    pairs = pair_table(geom)
    R = geom.num_rings
    slices, pair_idx = np.nonzero(counts)
    reps = counts[slices, pair_idx]
    slices = np.repeat(slices, reps)
    pair_idx = np.repeat(pair_idx, reps)
    ring_a, ring_b = np.divmod(slices, R)
    events = np.stack([ring_a, pairs.i[pair_idx], ring_b, pairs.j[pair_idx]], axis=1)
    return events.astype(LISTMODE_DTYPE)


def bin_events(geom: ScannerGeometry, events: np.ndarray) -> np.ndarray:
    """
    Histogram listmode events into a (R*R, D, 2D+1) sinogram.

    Each event is canonicalized so the crystal with the smaller in-ring index comes first.
    """
    D, R = geom.crystals_per_ring, geom.num_rings
    out_shape = (geom.num_slices, *geom.sinogram_shape)
    events = np.asarray(events, dtype=np.int64).reshape(-1, 4)
    if events.shape[0] == 0:
        return np.zeros(out_shape)

    ring_a, crys_a, ring_b, crys_b = events.T
    bad = ((ring_a < 0) | (ring_a >= R) | (ring_b < 0) | (ring_b >= R)
           | (crys_a < 0) | (crys_a >= D) | (crys_b < 0) | (crys_b >= D))
    if np.any(bad):
        raise DataError(f"{int(bad.sum())} events reference crystals outside the scanner")
    if np.any(crys_a == crys_b):
        raise DataError("events with identical transaxial crystals cannot be binned")

    swap = crys_a > crys_b
    ring_a, ring_b = np.where(swap, ring_b, ring_a), np.where(swap, ring_a, ring_b)
    crys_a, crys_b = np.where(swap, crys_b, crys_a), np.where(swap, crys_a, crys_b)

    angle, radial = lor_bins(geom, crys_a, crys_b)
    flat = ((ring_a * R + ring_b) * geom.angle_bins + angle) * geom.radial_bins + radial
    hist = np.bincount(flat, minlength=int(np.prod(out_shape)))
    return hist.reshape(out_shape).astype(np.float64)


class SimulationService:
    """Simulates coincidence data for phantom volumes on one scanner and image grid."""

    def __init__(self, geom: ScannerGeometry, size: int, voxel_mm: float):
        self.geom = geom
        self.projector = ProjectorService(geom, size, voxel_mm)
        self.pairs = pair_table(geom)

    def slice_images(self, volume: np.ndarray, ring_a: int, ring_b: int) -> np.ndarray:
        """Image seen by the oblique ring pair: mean of the two ring images."""
        return 0.5 * (volume[ring_a] + volume[ring_b])

    def attenuation(self, mumap: np.ndarray) -> np.ndarray:
        return np.exp(-self.projector.line_integrals(mumap))

    def pair_efficiency(self, eff: np.ndarray, ring_a: int, ring_b: int) -> np.ndarray:
        return eff[ring_a, self.pairs.i] * eff[ring_b, self.pairs.j]

    def expected_pair_rates(self, image: np.ndarray, mumap: np.ndarray, eff: np.ndarray,
                            ring_a: int = 0, ring_b: int = 0, scale: float = 1.0,
                            background: float = 0.0) -> np.ndarray:
        """
        rate = eff_a * eff_b * exp(-line integral of mu) * line integral of activity * scale,
        plus `background` times the mean true rate on every LOR crossing the image.
        """
        image = np.asarray(image, dtype=np.float64)
        mumap = np.asarray(mumap, dtype=np.float64)
        if image.shape != mumap.shape:
            raise ShapeError(f"activity {image.shape} and mu map {mumap.shape} differ")
        if image.shape != (self.projector.size, self.projector.size):
            raise ShapeError(f"image {image.shape} does not match projector grid {self.projector.size}")
        if not np.all(np.isfinite(image)):
            raise DataError("activity image contains non-finite values")
        if not np.all(np.isfinite(mumap)) or np.any(mumap < 0):
            raise DataError("mu map must be finite and non-negative")

        rates = (self.pair_efficiency(eff, ring_a, ring_b) * self.attenuation(mumap)
                 * self.projector.line_integrals(image) * scale)
        if background > 0:
            crossing = self.projector.crosses_fov()
            rates = rates + background * rates[crossing].mean() * crossing
        return rates

    def volume_pair_rates(self, activity: np.ndarray, mu: np.ndarray, eff: np.ndarray,
                          background: float = 0.0) -> np.ndarray:
        """Expected rates for every Michelogram slice. Shape (R*R, P)."""
        R = self.geom.num_rings
        rates = np.empty((R * R, len(self.pairs)))
        for ra in range(R):
            for rb in range(R):
                rates[ra * R + rb] = self.expected_pair_rates(
                    self.slice_images(activity, ra, rb), self.slice_images(mu, ra, rb),
                    eff, ra, rb, background=background)
        return rates

    @staticmethod
    def auto_scale(rates: np.ndarray, events_per_slice: float) -> float:
        """n_scale giving `events_per_slice` expected events per slice on the complete ring."""
        total = rates.sum() / rates.shape[0]
        return float(events_per_slice / total) if total > 0 else 1.0

    def sample_pair_counts(self, rates: np.ndarray, n_scale: float, seed: int) -> np.ndarray:
        """Poisson counts for every pair of the complete ring; one child stream per slice."""
        if not np.all(np.isfinite(rates)) or np.any(rates < 0):
            raise DataError("pair rates must be finite and non-negative")
        streams = np.random.SeedSequence(seed).spawn(rates.shape[0])
        counts = np.empty(rates.shape, dtype=np.int64)
        for k, stream in enumerate(streams):
            counts[k] = np.random.default_rng(stream).poisson(n_scale * rates[k])
        return counts

    def discard_inactive(self, counts: np.ndarray, mask: DetectorMask) -> np.ndarray:
        """Zero every pair that involves at least one inactive crystal."""
        R = self.geom.num_rings
        out = counts.copy()
        for ra in range(R):
            for rb in range(R):
                out[ra * R + rb, ~active_pairs(self.geom, mask, ra, rb)] = 0
        return out

    def generate_listmode(self, rates: np.ndarray, mask: Optional[DetectorMask], n_scale: float,
                          seed: int) -> np.ndarray:
        counts = self.sample_pair_counts(rates, n_scale, seed)
        if mask is not None:
            counts = self.discard_inactive(counts, mask)
        events = pair_counts_to_events(self.geom, counts)
        logger.info(f"Generated {events.shape[0]} listmode events (n_scale={n_scale:.4g})")
        return events

    def bin_pair_counts(self, counts: np.ndarray) -> np.ndarray:
        """Direct histogramming of (R*R, P) pair values; equals bin_events on the expanded listmode."""
        return np.stack([self.projector.to_sinogram(c.astype(np.float64)) for c in counts])


def filter_events(geom: ScannerGeometry, events: np.ndarray, mask: DetectorMask) -> np.ndarray:
    """Drop listmode events that touch an inactive crystal."""
    events = np.asarray(events).reshape(-1, 4)
    idx = events.astype(np.int64)
    if np.any(idx[:, [0, 2]] >= geom.num_rings) or np.any(idx[:, [1, 3]] >= geom.crystals_per_ring):
        raise DataError("events reference crystals outside the scanner")
    keep = mask.crystal_active[idx[:, 0], idx[:, 1]] & mask.crystal_active[idx[:, 2], idx[:, 3]]
    return events[keep]
