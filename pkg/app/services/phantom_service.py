"""
Phantom Service - synthetic brain-like activity and attenuation maps.
Nested-ellipse heads with per-subject perturbations stand in for clinical volumes.
"""
from dataclasses import dataclass, field
from typing import Dict, Tuple, Union

import numpy as np

from app.core.config import PhantomBlock
from app.core.errors import ConfigError, DataError

# Tissue classes with linear attenuation at 511 keV (1/mm)
TISSUES = ("air", "grey", "white", "bone", "muscle", "fat", "blood")
MU_TABLE = {
    "air": 0.0,
    "grey": 0.0096,
    "white": 0.00955,
    "bone": 0.0151,
    "muscle": 0.0099,
    "fat": 0.0090,
    "blood": 0.0101,
}

# Activity regions; csf is attenuated like blood (water-equivalent)
REGIONS = ("air", "grey", "white", "csf", "bone", "muscle", "fat", "blood")
REGION_TISSUE = {"air": "air", "grey": "grey", "white": "white", "csf": "blood",
                 "bone": "bone", "muscle": "muscle", "fat": "fat", "blood": "blood"}
DEFAULT_RATIOS = {"grey": 4.0, "white": 1.0, "csf": 0.0, "muscle": 0.5, "fat": 0.2, "blood": 1.5}


@dataclass(frozen=True)
class PhantomSpec:
    size: int = 64
    voxel_mm: float = 2.78
    ratios: Dict[str, float] = field(default_factory=lambda: dict(DEFAULT_RATIOS))
    perturbation: float = 0.08

    @classmethod
    def from_block(cls, block: PhantomBlock) -> "PhantomSpec":
        return cls(block.size, block.voxel_mm, block.ratios(), block.perturbation)

    def validate(self):
        if self.size < 16:
            raise ConfigError(f"phantom size must be >= 16, got {self.size}")
        for name, value in self.ratios.items():
            if name not in DEFAULT_RATIOS:
                raise ConfigError(f"unknown phantom region '{name}'")
            if value < 0:
                raise ConfigError(f"phantom ratio for '{name}' is negative ({value})")


@dataclass(eq=False)
class VoxelImage:
    values: np.ndarray
    voxel_size_mm: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise DataError("voxel image must be finite and non-negative")

    @property
    def shape(self):
        return self.values.shape


@dataclass(eq=False)
class TissueMap:
    classes: np.ndarray
    regions: np.ndarray

    @property
    def mu(self) -> np.ndarray:
        table = np.array([MU_TABLE[name] for name in TISSUES])
        return table[self.classes]

    def region_mask(self, name: str) -> np.ndarray:
        return self.regions == REGIONS.index(name)


def mu_lookup(tissue: Union[str, int]) -> float:
    if isinstance(tissue, (int, np.integer)):
        if not 0 <= tissue < len(TISSUES):
            raise DataError(f"unknown tissue class index {tissue}")
        tissue = TISSUES[tissue]
    if tissue not in MU_TABLE:
        raise DataError(f"unknown tissue class '{tissue}'")
    return MU_TABLE[tissue]


def pixel_grid(size: int) -> Tuple[np.ndarray, np.ndarray]:
    """Normalized (u, v) in [-1, 1] at pixel centers; u follows columns, v follows rows."""
    c = (np.arange(size) - (size - 1) / 2.0) / (size / 2.0)
    v, u = np.meshgrid(c, c, indexing="ij")
    return u, v


def _inside(u, v, cx, cy, a, b, theta):
    du, dv = u - cx, v - cy
    xr = du * np.cos(theta) + dv * np.sin(theta)
    yr = -du * np.sin(theta) + dv * np.cos(theta)
    return (xr / a) ** 2 + (yr / b) ** 2 <= 1.0


@dataclass(frozen=True)
class _Subject:
    head_a: float
    head_b: float
    theta: float
    brain_scale: float
    white_scale: float
    ventricle_len: float
    ventricle_gap: float
    vessel_angles: Tuple[float, ...]


def _draw_subject(rng: np.random.Generator, p: float) -> _Subject:
    jitter = lambda: 1.0 + rng.uniform(-p, p)
    return _Subject(
        head_a=0.74 * jitter(),
        head_b=0.88 * jitter(),
        theta=rng.uniform(-1.0, 1.0) * p * 1.5,
        brain_scale=0.86 * (1.0 + 0.25 * rng.uniform(-p, p)),
        white_scale=0.62 * jitter(),
        ventricle_len=0.20 * jitter(),
        ventricle_gap=0.10 * jitter(),
        vessel_angles=tuple(rng.uniform(0, 2 * np.pi, size=3)),
    )


def _render_regions(size: int, s: _Subject, z: float) -> np.ndarray:
    """Paint region labels from the outside in; `z` in [-1, 1] is the axial position."""
    u, v = pixel_grid(size)
    taper = 1.0 - 0.06 * z ** 2
    a, b = s.head_a * taper, s.head_b * taper
    regions = np.zeros((size, size), dtype=np.uint8)

    def paint(mask, name):
        regions[mask] = REGIONS.index(name)

    paint(_inside(u, v, 0, 0, a, b, s.theta), "muscle")
    paint(_inside(u, v, 0, 0, a * 0.965, b * 0.965, s.theta), "fat")
    paint(_inside(u, v, 0, 0, a * 0.935, b * 0.935, s.theta), "bone")
    ba, bb = a * s.brain_scale, b * s.brain_scale
    paint(_inside(u, v, 0, 0, ba, bb, s.theta), "grey")
    paint(_inside(u, v, 0, 0, ba * s.white_scale, bb * s.white_scale, s.theta), "white")

    vent = s.ventricle_len * (1.0 - 0.35 * abs(z))
    for side in (-1.0, 1.0):
        cx = side * s.ventricle_gap * ba
        paint(_inside(u, v, cx, 0.05 * bb, 0.28 * vent, vent, s.theta + side * 0.25), "csf")

    for phi in s.vessel_angles:
        cx = 0.8 * ba * np.cos(phi)
        cy = 0.8 * bb * np.sin(phi)
        paint(_inside(u, v, cx, cy, 0.035, 0.035, 0.0), "blood")
    return regions


def _materialize(regions: np.ndarray, ratios: Dict[str, float]) -> Tuple[np.ndarray, np.ndarray]:
    activity_table = np.zeros(len(REGIONS))
    for name, value in ratios.items():
        activity_table[REGIONS.index(name)] = value
    tissue_table = np.array([TISSUES.index(REGION_TISSUE[name]) for name in REGIONS], dtype=np.uint8)
    return activity_table[regions], tissue_table[regions]


def make_brain_phantom(spec: PhantomSpec, seed: int, z: float = 0.0) -> Tuple[VoxelImage, TissueMap]:
    """
    Generate one 2-D head slice.

    Region activities are piecewise constant, so region means equal the configured ratios.
    """
    spec.validate()
    subject = _draw_subject(np.random.default_rng(seed), spec.perturbation)
    regions = _render_regions(spec.size, subject, z)
    activity, classes = _materialize(regions, spec.ratios)
    return VoxelImage(activity, spec.voxel_mm), TissueMap(classes=classes, regions=regions)


def make_phantom_volume(spec: PhantomSpec, seed: int, num_rings: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Stack `num_rings` slices of one subject with a small axial taper.

    Returns:
        activity (R, N, N) and mu (R, N, N) arrays.
    """
    spec.validate()
    subject = _draw_subject(np.random.default_rng(seed), spec.perturbation)
    activity = np.empty((num_rings, spec.size, spec.size))
    mu = np.empty_like(activity)
    for r in range(num_rings):
        z = 0.0 if num_rings == 1 else (2.0 * r / (num_rings - 1) - 1.0) * 0.5
        regions = _render_regions(spec.size, subject, z)
        act, classes = _materialize(regions, spec.ratios)
        activity[r] = act
        mu[r] = TissueMap(classes=classes, regions=regions).mu
    return activity, mu


def make_disk_image(size: int, radius_px: float, value: float = 1.0, supersample: int = 8) -> np.ndarray:
    """Centered uniform disk with area-weighted edge pixels."""
    offsets = (np.arange(supersample) + 0.5) / supersample - 0.5
    c = np.arange(size) - (size - 1) / 2.0
    fine = (c[:, None] + offsets[None, :]).ravel()
    yy, xx = np.meshgrid(fine, fine, indexing="ij")
    inside = (xx ** 2 + yy ** 2 <= radius_px ** 2).astype(np.float64)
    coverage = inside.reshape(size, supersample, size, supersample).mean(axis=(1, 3))
    return value * coverage
