"""
Metrics Service - reference image metrics and Table-style aggregation.
"""
from typing import Iterable, List, Optional, Tuple

import numpy as np
import pandas as pd
from skimage.metrics import structural_similarity

from app.core.config import STAGE_ORDER, Metric
from app.core.errors import ReportError, ShapeError

PSNR_CAP_DB = 99.0
REPORT_COLUMNS = ["pattern", "stage", "metric", "mean", "std", "n"]


def _check_pair(x: np.ndarray, ref: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ShapeError(f"image {x.shape} and reference {ref.shape} differ")
    return x, ref


def psnr(x: np.ndarray, ref: np.ndarray) -> float:
    """PSNR with peak = max(ref); identical inputs report the 99 dB cap."""
    x, ref = _check_pair(x, ref)
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    peak = float(ref.max())
    if peak <= 0:
        peak = 1.0
    return min(PSNR_CAP_DB, 10.0 * np.log10(peak ** 2 / mse))


def ssim(x: np.ndarray, ref: np.ndarray) -> float:
    """Gaussian-window SSIM (sigma 1.5, 11x11), data range shared by both inputs."""
    x, ref = _check_pair(x, ref)
    if x.ndim != 2 or min(x.shape) < 11:
        raise ShapeError(f"SSIM needs a 2-D image of at least 11x11, got {x.shape}")
    data_range = max(x.max(), ref.max()) - min(x.min(), ref.min())
    if data_range <= 0:
        data_range = 1.0
    return float(structural_similarity(
        x, ref, data_range=data_range, gaussian_weights=True, sigma=1.5,
        use_sample_covariance=False, K1=0.01, K2=0.03,
    ))


def image_metrics(x: np.ndarray, ref: np.ndarray) -> Tuple[float, float]:
    return psnr(x, ref), ssim(x, ref)


def metric_rows(pattern: int, stage: str, volume_id: int, slice_id: int,
                x: np.ndarray, ref: np.ndarray) -> List[dict]:
    p, s = image_metrics(x, ref)
    base = {"pattern": pattern, "stage": stage, "volume_id": volume_id, "slice_id": slice_id}
    return [{**base, "metric": Metric.PSNR, "value": p}, {**base, "metric": Metric.SSIM, "value": s}]


def aggregate_report(items: pd.DataFrame, expected: Optional[Iterable[Tuple[int, str]]] = None) -> pd.DataFrame:
    """
    Mean and population std per (pattern, stage, metric).

    Rows are ordered per pattern block: stages in report order, SSIM before PSNR.

    Raises:
        ReportError: no items at all, or an expected (pattern, stage) group is empty.
    """
    if items is None or len(items) == 0:
        raise ReportError("no metric items to aggregate")
    missing = [c for c in ("pattern", "stage", "metric", "value") if c not in items.columns]
    if missing:
        raise ReportError(f"metric items lack columns {missing}")

    present = set(map(tuple, items[["pattern", "stage"]].drop_duplicates().itertuples(index=False)))
    for group in expected or ():
        if tuple(group) not in present:
            raise ReportError(f"no metric items for pattern {group[0]} stage '{group[1]}'")

    grouped = items.groupby(["pattern", "stage", "metric"])["value"]
    report = grouped.agg(mean="mean", std=lambda v: float(np.std(v.to_numpy(), ddof=0)), n="size").reset_index()

    stage_rank = {s: k for k, s in enumerate(STAGE_ORDER)}
    metric_rank = {Metric.SSIM: 0, Metric.PSNR: 1}
    report["_s"] = report["stage"].map(lambda s: stage_rank.get(s, len(stage_rank)))
    report["_m"] = report["metric"].map(lambda m: metric_rank.get(m, 2))
    report = report.sort_values(["pattern", "_s", "stage", "_m"], kind="mergesort").drop(columns=["_s", "_m"])
    return report[REPORT_COLUMNS].reset_index(drop=True)
