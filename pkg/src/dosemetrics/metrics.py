"""Exact DVH metric evaluation: D-quantiles, extrema, mean, V-fractions.

Quantile metrics are order statistics of the ROI's voxel doses: the k-th
largest dose with k = ceil(x * N / 100) for the hottest x% and
k = ceil(x / V_voxel) for the hottest x cc. They are computed by k-th
order-statistic selection, never by interpolating between sorted values.
V-metrics count voxels at or above a threshold; a voxel exactly at the
threshold counts as covered.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bitmask import BitMaskVolume, MaskAccounting
from .template import MetricSpec
from .volumes import DoseGrid, RoiMask

__all__ = [
    "EmptyRoiError",
    "MetricValue",
    "gather_roi_doses",
    "quantile_rank",
    "hottest_cc_rank",
    "kth_largest",
    "kth_largest_position",
    "d_quantile_pct",
    "d_hottest_cc",
    "d_extrema",
    "d_mean",
    "v_exact",
    "cumulative_dvh",
    "evaluate_metric",
]


class EmptyRoiError(ValueError):
    """Raised when a metric is requested for an ROI with zero voxels."""


@dataclass(frozen=True)
class MetricValue:
    """One evaluated metric: Gy for D-metrics, fraction in [0,1] for V-metrics."""

    spec: MetricSpec
    value: float
    roi_voxel_count: int
    clamped: bool = False


def _ceil_rank(v: float) -> int:
    # ceil with a small guard so float noise at exact-integer cutoffs
    # cannot push the rank up by one
    return max(1, math.ceil(v - 1e-8))


def quantile_rank(x_pct: float, n: int) -> int:
    """Rank k of the hottest-x% order statistic, k = ceil(x * N / 100)."""
    if not 0 < x_pct <= 100:
        raise ValueError(f"percent must be in (0, 100], got {x_pct}")
    if n < 1:
        raise EmptyRoiError("quantile of an empty dose list")
    return min(n, _ceil_rank(x_pct * n / 100.0))


def hottest_cc_rank(x_cc: float, voxel_volume_cc: float, n: int) -> tuple[int, bool]:
    """Rank for the hottest-x-cc metric; clamps to N when x exceeds the ROI volume."""
    if x_cc <= 0:
        raise ValueError(f"volume must be positive, got {x_cc} cc")
    if voxel_volume_cc <= 0:
        raise ValueError(f"voxel volume must be positive, got {voxel_volume_cc} cc")
    if n < 1:
        raise EmptyRoiError("hottest-cc metric of an empty dose list")
    k = _ceil_rank(x_cc / voxel_volume_cc)
    if k > n:
        return n, True
    return k, False


def kth_largest(doses: np.ndarray, k: int) -> float:
    """The k-th largest value, found by selection rather than a full sort."""
    n = doses.size
    if not 1 <= k <= n:
        raise ValueError(f"rank {k} out of range for {n} doses")
    return float(np.partition(doses, n - k)[n - k])


def kth_largest_position(doses: np.ndarray, k: int) -> int:
    """Position of the selected voxel in the gathered (z-major) dose order.

    Among ties at the selected value, the smallest position wins, which
    keeps quantile-term gradients deterministic.
    """
    value = kth_largest(doses, k)
    return int(np.flatnonzero(doses == value)[0])


def d_quantile_pct(doses: np.ndarray, x_pct: float) -> float:
    doses = np.asarray(doses, dtype=np.float64)
    return kth_largest(doses, quantile_rank(x_pct, doses.size))


def d_hottest_cc(doses: np.ndarray, x_cc: float, voxel_volume_cc: float) -> tuple[float, bool]:
    """Minimum dose of the hottest x cc; returns (dose, clamped)."""
    doses = np.asarray(doses, dtype=np.float64)
    k, clamped = hottest_cc_rank(x_cc, voxel_volume_cc, doses.size)
    return kth_largest(doses, k), clamped


def d_extrema(doses: np.ndarray) -> tuple[float, float]:
    doses = np.asarray(doses, dtype=np.float64)
    if doses.size == 0:
        raise EmptyRoiError("extrema of an empty dose list")
    return float(doses.max()), float(doses.min())


def d_mean(doses: np.ndarray) -> float:
    doses = np.asarray(doses, dtype=np.float64)
    if doses.size == 0:
        raise EmptyRoiError("mean of an empty dose list")
    return float(doses.mean())


def v_exact(doses: np.ndarray, threshold: float) -> float:
    """Fraction of voxels with dose >= threshold (at-threshold counts)."""
    doses = np.asarray(doses, dtype=np.float64)
    if doses.size == 0:
        raise EmptyRoiError("volume fraction of an empty dose list")
    return float(np.count_nonzero(doses >= threshold)) / doses.size


def cumulative_dvh(
    doses: np.ndarray, bin_width: float, max_dose: float
) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative DVH curve sampled at multiples of bin_width.

    Returns (thresholds, fractions); fractions[i] equals
    v_exact(doses, thresholds[i]), so the curve starts at 1.0 for
    threshold 0 and is non-increasing.
    """
    if bin_width <= 0:
        raise ValueError(f"bin width must be positive, got {bin_width}")
    doses = np.asarray(doses, dtype=np.float64)
    if doses.size == 0:
        raise EmptyRoiError("DVH of an empty dose list")
    n_bins = int(math.floor(max_dose / bin_width + 1e-9)) + 1
    thresholds = np.arange(n_bins, dtype=np.float64) * bin_width
    ordered = np.sort(doses)
    covered = doses.size - np.searchsorted(ordered, thresholds, side="left")
    return thresholds, covered.astype(np.float64) / doses.size


RoiSource = RoiMask | tuple[BitMaskVolume, "str | int"]


def _resolve_mask(source: RoiSource, accounting: MaskAccounting | None = None) -> RoiMask:
    if isinstance(source, RoiMask):
        return source
    volume, roi = source
    return volume.decode(roi, accounting)


def gather_roi_doses(grid: DoseGrid, source: RoiSource) -> np.ndarray:
    """Doses of the ROI's member voxels, in z-major voxel order, native units."""
    mask = _resolve_mask(source)
    if mask.dims != grid.dims:
        raise ValueError(f"mask dims {mask.dims} do not match grid dims {grid.dims}")
    if mask.is_empty:
        raise EmptyRoiError(f"ROI {mask.name!r} is empty")
    return grid.values[mask.occupancy]


def evaluate_metric(
    grid: DoseGrid,
    source: RoiSource,
    spec: MetricSpec,
    prescriptions: dict[str, float] | None = None,
) -> MetricValue:
    """Evaluate one template metric exactly.

    D-metric values are reported in Gy regardless of the grid's unit scale;
    V-metric values are fractions in [0, 1].
    """
    doses = gather_roi_doses(grid, source)
    n = doses.size
    scale = grid.unit_scale
    kind = spec.metric.kind
    clamped = False

    if kind == "D_mean":
        value = d_mean(doses) * scale
    elif kind == "D_max":
        value = d_extrema(doses)[0] * scale
    elif kind == "D_min":
        value = d_extrema(doses)[1] * scale
    elif kind == "D_pct":
        value = d_quantile_pct(doses, spec.metric.param) * scale
    elif kind == "D_cc":
        native, clamped = d_hottest_cc(doses, spec.metric.param, grid.voxel_volume_cc)
        value = native * scale
    elif kind == "V_pct":
        if not prescriptions or spec.roi not in prescriptions:
            raise ValueError(f"V_pct for {spec.roi!r} needs a prescription")
        threshold_gy = spec.metric.param / 100.0 * prescriptions[spec.roi]
        value = v_exact(doses, threshold_gy / scale)
    elif kind == "V_gy":
        value = v_exact(doses, spec.metric.param / scale)
    else:  # unreachable given template validation
        raise ValueError(f"unknown metric kind {kind!r}")

    return MetricValue(spec=spec, value=value, roi_voxel_count=int(n), clamped=clamped)
