"""
Stack Service - five-channel training samples and cross-validation folds.
"""
import math
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.core.errors import BoundsError, ConfigError, ShapeError
from app.core.logger import logger


@dataclass(eq=False)
class FiveChannelSample:
    input: np.ndarray
    target: Optional[np.ndarray]
    slice_index: int
    volume_id: int
    channels: Tuple[int, ...]

    def channels_last(self) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        tgt = None if self.target is None else np.moveaxis(self.target, 0, -1)
        return np.moveaxis(self.input, 0, -1), tgt


def rings_of(volume: np.ndarray) -> int:
    R = math.isqrt(volume.shape[0])
    if R * R != volume.shape[0]:
        raise ShapeError(f"volume has {volume.shape[0]} slices, expected a square count R*R")
    return R


def neighbor_indices(j: int, num_rings: int, context: str = "five") -> Tuple[int, ...]:
    """Slice indices (j-R, j-1, j, j+1, j+R); out-of-range neighbors fall back to j."""
    n = num_rings * num_rings
    if not 0 <= j < n:
        raise BoundsError(f"slice index {j} outside [0, {n})")
    if context == "single":
        return (j,)
    wanted = (j - num_rings, j - 1, j, j + 1, j + num_rings)
    return tuple(k if 0 <= k < n else j for k in wanted)


def assemble_five_channel(volume: np.ndarray, j: int, target_volume: Optional[np.ndarray] = None,
                          volume_id: int = 0, context: str = "five") -> FiveChannelSample:
    R = rings_of(volume)
    channels = neighbor_indices(j, R, context)
    idx = list(channels)
    target = None if target_volume is None else target_volume[idx]
    return FiveChannelSample(input=volume[idx], target=target, slice_index=j,
                             volume_id=volume_id, channels=channels)


def iter_volume_samples(volume: np.ndarray, target_volume: Optional[np.ndarray] = None,
                        volume_id: int = 0, context: str = "five") -> Iterator[FiveChannelSample]:
    for j in range(volume.shape[0]):
        yield assemble_five_channel(volume, j, target_volume, volume_id, context)


def stack_volume(volume: np.ndarray, context: str = "five") -> np.ndarray:
    """All samples of a volume as one (R*R, C, D, 2D+1) array."""
    R = rings_of(volume)
    idx = np.array([neighbor_indices(j, R, context) for j in range(R * R)])
    return volume[idx]


@dataclass(frozen=True)
class FoldSplit:
    folds: Tuple[Tuple[int, ...], ...]
    seed: int

    @property
    def k(self) -> int:
        return len(self.folds)

    def test_ids(self, fold: int) -> Tuple[int, ...]:
        return self.folds[fold]

    def train_ids(self, fold: int) -> Tuple[int, ...]:
        return tuple(i for f, ids in enumerate(self.folds) if f != fold for i in ids)

    def fold_of(self) -> Dict[int, int]:
        return {i: f for f, ids in enumerate(self.folds) for i in ids}


def kfold_split(ids: Sequence[int], k: int, seed: int) -> FoldSplit:
    ids = list(ids)
    if k < 1 or k > len(ids):
        raise ConfigError(f"cannot split {len(ids)} ids into {k} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    folds = tuple(tuple(int(ids[p]) for p in part) for part in np.array_split(order, k))
    logger.info(f"Split {len(ids)} volumes into {k} folds of sizes {[len(f) for f in folds]}")
    return FoldSplit(folds=folds, seed=seed)


def split_validation(train_ids: Sequence[int], fraction: float, seed: int) -> Tuple[List[int], List[int]]:
    """Hold out a validation group from the training ids of one fold."""
    train_ids = list(train_ids)
    n_val = int(round(fraction * len(train_ids)))
    if fraction > 0 and len(train_ids) > 1:
        n_val = min(max(n_val, 1), len(train_ids) - 1)
    else:
        n_val = 0
    order = np.random.default_rng(seed).permutation(len(train_ids))
    val = sorted(train_ids[p] for p in order[:n_val])
    fit = sorted(train_ids[p] for p in order[n_val:])
    return fit, val


def manifest_frame(split: FoldSplit, paths: Dict[int, Dict[str, str]]) -> pd.DataFrame:
    """Dataset manifest: one row per volume with its test fold and artifact paths."""
    fold_of = split.fold_of()
    rows = [{"volume_id": vid, "fold": fold_of.get(vid, -1), **files} for vid, files in sorted(paths.items())]
    return pd.DataFrame(rows)
