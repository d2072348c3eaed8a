"""
Geometry Service - cylindrical scanner layout.
Crystal placement, LOR-to-sinogram binning and incomplete-ring masks.
"""
import hashlib
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from typing import FrozenSet, Iterable, Sequence, Tuple

import numpy as np

from app.core.config import GeometryBlock
from app.core.errors import BoundsError, ConfigError, DegenerateLorError
from app.core.logger import logger


@dataclass(frozen=True)
class ScannerGeometry:
    radius_mm: float = 253.71
    crystals_per_ring: int = 182
    num_rings: int = 4
    axial_spacing_mm: float = 5.37

    def __post_init__(self):
        D = self.crystals_per_ring
        if D < 4 or D % 2:
            raise ConfigError(f"crystals_per_ring must be even and >= 4, got {D}")
        if self.num_rings < 1:
            raise ConfigError(f"num_rings must be >= 1, got {self.num_rings}")
        if self.radius_mm <= 0:
            raise ConfigError(f"radius_mm must be positive, got {self.radius_mm}")

    @classmethod
    def from_block(cls, block: GeometryBlock) -> "ScannerGeometry":
        return cls(block.radius_mm, block.crystals_per_ring, block.num_rings, block.axial_spacing_mm)

    @property
    def angle_bins(self) -> int:
        return self.crystals_per_ring

    @property
    def radial_bins(self) -> int:
        return 2 * self.crystals_per_ring + 1

    @property
    def sinogram_shape(self) -> Tuple[int, int]:
        return self.angle_bins, self.radial_bins

    @property
    def num_slices(self) -> int:
        return self.num_rings ** 2

    def digest(self) -> bytes:
        """16-byte fingerprint stored in listmode headers."""
        packed = struct.pack("<dIId", self.radius_mm, self.crystals_per_ring,
                             self.num_rings, self.axial_spacing_mm)
        return hashlib.md5(packed).digest()


@dataclass(frozen=True)
class LorBin:
    angle_index: int
    radial_index: int


@dataclass(frozen=True, eq=False)
class DetectorMask:
    angular_gaps: Tuple[Tuple[float, float], ...]
    inactive_rings: FrozenSet[int]
    crystal_active: np.ndarray = field(repr=False)

    @property
    def inactive_fraction(self) -> float:
        return float(1.0 - self.crystal_active.mean())


@dataclass(frozen=True, eq=False)
class PairTable:
    """All transaxial crystal pairs i < j of one ring pair and the bins they land in."""
    i: np.ndarray
    j: np.ndarray
    angle: np.ndarray
    radial: np.ndarray

    def __len__(self):
        return self.i.size


def crystal_position(geom: ScannerGeometry, ring: int, i: int) -> Tuple[float, float, float]:
    D = geom.crystals_per_ring
    if not (0 <= i < D) or not (0 <= ring < geom.num_rings):
        raise BoundsError(f"crystal (ring={ring}, i={i}) outside {geom.num_rings} rings x {D} crystals")
    theta = 2.0 * np.pi * i / D
    return (geom.radius_mm * np.cos(theta), geom.radius_mm * np.sin(theta), ring * geom.axial_spacing_mm)


def crystal_xy(geom: ScannerGeometry) -> np.ndarray:
    """(D, 2) transaxial crystal centers in mm."""
    theta = 2.0 * np.pi * np.arange(geom.crystals_per_ring) / geom.crystals_per_ring
    return geom.radius_mm * np.stack([np.cos(theta), np.sin(theta)], axis=1)


def crystal_angles_deg(geom: ScannerGeometry) -> np.ndarray:
    return 360.0 * np.arange(geom.crystals_per_ring) / geom.crystals_per_ring


def lor_bins(geom: ScannerGeometry, i, j) -> Tuple[np.ndarray, np.ndarray]:
    """
    Vectorized LOR binning.

    The LOR normal angle is pi*(i+j)/D, so its angle bin is the integer i+j folded
    into [0, D); folding past pi flips the sign of the radial offset.
    """
    D = geom.crystals_per_ring
    i = np.asarray(i, dtype=np.int64)
    j = np.asarray(j, dtype=np.int64)
    if np.any(i == j):
        raise DegenerateLorError("LOR endpoints coincide (i == j)")
    if np.any((i < 0) | (i >= D) | (j < 0) | (j >= D)):
        raise BoundsError(f"crystal index outside [0, {D})")

    total = i + j
    folded = total >= D
    angle = np.where(folded, total - D, total)
    s_norm = np.cos(np.pi * (j - i) / D)
    s_norm = np.where(folded, -s_norm, s_norm)
    radial = np.floor(s_norm * D + 0.5).astype(np.int64) + D
    return angle, radial


def lor_to_bin(geom: ScannerGeometry, i: int, j: int) -> LorBin:
    a, s = lor_bins(geom, i, j)
    return LorBin(int(a), int(s))


@lru_cache(maxsize=8)
def pair_table(geom: ScannerGeometry) -> PairTable:
    i, j = np.triu_indices(geom.crystals_per_ring, k=1)
    a, s = lor_bins(geom, i, j)
    return PairTable(i=i, j=j, angle=a, radial=s)


def flat_bins(geom: ScannerGeometry) -> np.ndarray:
    pairs = pair_table(geom)
    return pairs.angle * geom.radial_bins + pairs.radial


@lru_cache(maxsize=8)
def reachable_bins(geom: ScannerGeometry) -> np.ndarray:
    """Bins hit by at least one pair of the complete ring; all others stay structurally empty."""
    hits = np.bincount(flat_bins(geom), minlength=geom.angle_bins * geom.radial_bins)
    return (hits > 0).reshape(geom.sinogram_shape)


def slice_index(geom: ScannerGeometry, ring_a: int, ring_b: int) -> int:
    R = geom.num_rings
    if not (0 <= ring_a < R and 0 <= ring_b < R):
        raise BoundsError(f"ring pair ({ring_a}, {ring_b}) outside [0, {R})")
    return ring_a * R + ring_b


def slice_rings(geom: ScannerGeometry, j: int) -> Tuple[int, int]:
    if not 0 <= j < geom.num_slices:
        raise BoundsError(f"slice {j} outside [0, {geom.num_slices})")
    return divmod(j, geom.num_rings)


def direct_slices(geom: ScannerGeometry) -> np.ndarray:
    return np.arange(geom.num_rings) * (geom.num_rings + 1)


def normalize_gaps(gap_spec: Iterable[Sequence[float]]) -> Tuple[Tuple[float, float], ...]:
    """Wrap intervals into [0, 360), split those crossing 360 and merge overlaps."""
    pieces = []
    for interval in gap_spec:
        start, end = float(interval[0]), float(interval[1])
        if start >= end:
            raise ConfigError(f"malformed gap [{start}, {end}): start must be below end")
        if end - start >= 360.0:
            pieces.append((0.0, 360.0))
            continue
        shift = float(np.floor(start / 360.0)) * 360.0
        start, end = start - shift, end - shift
        if end > 360.0:
            pieces.extend([(start, 360.0), (0.0, end - 360.0)])
        else:
            pieces.append((start, end))

    merged = []
    for start, end in sorted(pieces):
        if merged and start <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], end))
        else:
            merged.append((start, end))
    return tuple(merged)


def crystals_in_gaps(geom: ScannerGeometry, gaps: Tuple[Tuple[float, float], ...]) -> np.ndarray:
    angles = crystal_angles_deg(geom)
    inside = np.zeros(angles.shape, dtype=bool)
    for start, end in gaps:
        inside |= (angles >= start) & (angles < end)
    return inside


def build_detector_mask(geom: ScannerGeometry, gap_spec, inactive_rings=()) -> DetectorMask:
    gaps = normalize_gaps(gap_spec)
    rings = frozenset(int(r) for r in inactive_rings)
    for r in rings:
        if not 0 <= r < geom.num_rings:
            raise ConfigError(f"inactive ring {r} outside [0, {geom.num_rings})")

    active = np.tile(~crystals_in_gaps(geom, gaps), (geom.num_rings, 1))
    for r in rings:
        active[r] = False
    return DetectorMask(angular_gaps=gaps, inactive_rings=rings, crystal_active=active)


def active_pairs(geom: ScannerGeometry, mask: DetectorMask, ring_a: int, ring_b: int) -> np.ndarray:
    pairs = pair_table(geom)
    return mask.crystal_active[ring_a, pairs.i] & mask.crystal_active[ring_b, pairs.j]


def slice_bin_mask(geom: ScannerGeometry, mask: DetectorMask, ring_a: int, ring_b: int) -> np.ndarray:
    keep = active_pairs(geom, mask, ring_a, ring_b)
    hits = np.bincount(flat_bins(geom)[keep], minlength=geom.angle_bins * geom.radial_bins)
    hit = (hits > 0).reshape(geom.sinogram_shape)
    return ~(reachable_bins(geom) & ~hit)


def build_masks(geom: ScannerGeometry, gap_spec, inactive_rings=()) -> Tuple[DetectorMask, np.ndarray]:
    """
    Derive the crystal mask and the per-slice sinogram validity mask.

    Returns:
        (DetectorMask, bin mask of shape (R*R, D, 2D+1)); a bin is invalid only when the
        complete ring reaches it and no active pair does.
    """
    mask = build_detector_mask(geom, gap_spec, inactive_rings)
    R = geom.num_rings
    bin_mask = np.empty((geom.num_slices, *geom.sinogram_shape), dtype=bool)
    for ra in range(R):
        for rb in range(R):
            bin_mask[ra * R + rb] = slice_bin_mask(geom, mask, ra, rb)

    gaps = ", ".join(f"[{float(a):g}, {float(b):g})" for a, b in mask.angular_gaps) or "none"
    rings = [int(r) for r in sorted(mask.inactive_rings)]
    logger.info(
        f"Built masks: gaps={gaps}, inactive rings={rings}, "
        f"inactive crystals={mask.inactive_fraction:.4f}, invalid bins={1 - bin_mask.mean():.4f}"
    )
    return mask, bin_mask


def discarded_pair_fraction(geom: ScannerGeometry, mask: DetectorMask, ring_a: int = 0, ring_b: int = 0) -> float:
    return float(1.0 - active_pairs(geom, mask, ring_a, ring_b).mean())
