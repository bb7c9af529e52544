"""Sigmoid surrogate for V-metrics and principled slope selection.

The hard threshold count in a V-metric is replaced by a logistic sigmoid
of slope ``alpha``. The slope is chosen from data: given the fraction
``q_m`` of voxels within ``m`` Gy of the threshold and an error tolerance
``eps``, the mean pointwise surrogate error is bounded by
``q_m / 2 + (1 - q_m) * exp(-alpha * m)``, and the smallest slope meeting
the tolerance is ``alpha = (1 / m) * ln((1 - q_m) / (eps - q_m / 2))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .metrics import EmptyRoiError, RoiSource, gather_roi_doses
from .volumes import DoseGrid

__all__ = [
    "PAPER_ALPHA",
    "DEFAULT_MARGIN_GY",
    "DEFAULT_TOLERANCE",
    "SurrogateConfig",
    "InfeasibleToleranceError",
    "sigmoid_indicator",
    "v_approx",
    "pointwise_error",
    "margin_fraction_qm",
    "error_bound",
    "alpha_min",
    "select_alpha_from_cohort",
]

# Published slope constants (1/Gy) for users without cohort data; their
# underlying margin statistics are not re-derivable from public numbers.
PAPER_ALPHA: dict[str, float] = {"PTV_54.25": 209.0, "PTV_70": 176.0}

DEFAULT_MARGIN_GY = 0.5
DEFAULT_TOLERANCE = 0.01


class InfeasibleToleranceError(ValueError):
    """No finite slope can meet the tolerance for the given margin fraction."""

    def __init__(self, eps: float, q_m: float):
        self.min_feasible_eps = q_m / 2.0
        super().__init__(
            f"tolerance {eps} is infeasible for margin fraction {q_m}: voxels inside "
            f"the margin contribute a worst-case 1/2 each, so the tolerance must "
            f"exceed q_m/2 = {self.min_feasible_eps}"
        )


@dataclass(frozen=True)
class SurrogateConfig:
    """Slope and provenance of one V-metric surrogate.

    ``alpha`` is in 1/Gy and ``threshold``/``margin_m`` in Gy; callers
    operating on unit-scaled doses rescale internally so the surrogate is
    invariant to the normalization choice.
    """

    alpha: float
    threshold: float
    margin_m: float = DEFAULT_MARGIN_GY
    tolerance_eps: float = DEFAULT_TOLERANCE
    q_m: float | None = None
    roi: str | None = None

    def __post_init__(self) -> None:
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.margin_m <= 0:
            raise ValueError(f"margin must be positive, got {self.margin_m}")
        if not 0 < self.tolerance_eps < 1:
            raise ValueError(f"tolerance must be in (0, 1), got {self.tolerance_eps}")


def sigmoid_indicator(z, alpha: float):
    """Logistic sigmoid 1 / (1 + exp(-alpha * z)), overflow-safe.

    Saturates cleanly for |alpha * z| up to at least 1e4. Accepts scalars
    or arrays; returns the matching shape.
    """
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    t = np.asarray(alpha * np.asarray(z, dtype=np.float64))
    out = np.empty_like(t, dtype=np.float64)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    if np.isscalar(z) or np.ndim(z) == 0:
        return float(out)
    return out


def v_approx(doses: np.ndarray, cfg: SurrogateConfig) -> float:
    """Smooth volume fraction: mean sigmoid of (dose - threshold)."""
    doses = np.asarray(doses, dtype=np.float64)
    if doses.size == 0:
        raise EmptyRoiError("surrogate volume fraction of an empty dose list")
    return float(np.mean(sigmoid_indicator(doses - cfg.threshold, cfg.alpha)))


def pointwise_error(doses: np.ndarray, cfg: SurrogateConfig) -> float:
    """Mean |step - sigmoid| over the ROI.

    With the at-threshold convention (a voxel exactly at the threshold is
    covered), the pointwise error is sigmoid(-alpha * |z|) for every voxel.
    """
    doses = np.asarray(doses, dtype=np.float64)
    if doses.size == 0:
        raise EmptyRoiError("pointwise error of an empty dose list")
    z = doses - cfg.threshold
    return float(np.mean(sigmoid_indicator(-np.abs(z), cfg.alpha)))


def margin_fraction_qm(doses: np.ndarray, threshold: float, margin_m: float) -> float:
    """Fraction of voxels whose dose lies within +-margin of the threshold."""
    if margin_m <= 0:
        raise ValueError(f"margin must be positive, got {margin_m}")
    doses = np.asarray(doses, dtype=np.float64)
    if doses.size == 0:
        raise EmptyRoiError("margin fraction of an empty dose list")
    return float(np.count_nonzero(np.abs(doses - threshold) <= margin_m)) / doses.size


def error_bound(alpha: float, q_m: float, margin_m: float) -> float:
    """Upper bound on the mean pointwise error: q_m/2 + (1-q_m)*exp(-alpha*m)."""
    return q_m / 2.0 + (1.0 - q_m) * math.exp(-alpha * margin_m)


def alpha_min(q_m: float, margin_m: float, eps: float) -> float:
    """Smallest slope whose error bound meets the tolerance.

    Infeasible (no finite slope) when eps <= q_m / 2, since in-margin
    voxels alone contribute q_m / 2 to the bound.
    """
    if margin_m <= 0:
        raise ValueError(f"margin must be positive, got {margin_m}")
    if not 0 < eps < 1:
        raise ValueError(f"tolerance must be in (0, 1), got {eps}")
    if not 0 <= q_m <= 1:
        raise ValueError(f"margin fraction must be in [0, 1], got {q_m}")
    if eps <= q_m / 2.0:
        raise InfeasibleToleranceError(eps, q_m)
    return math.log((1.0 - q_m) / (eps - q_m / 2.0)) / margin_m


def select_alpha_from_cohort(
    cohort: list[tuple[DoseGrid, RoiSource | None]],
    threshold_gy: float,
    margin_m: float = DEFAULT_MARGIN_GY,
    eps: float = DEFAULT_TOLERANCE,
    roi_label: str | None = None,
) -> SurrogateConfig:
    """Pool member-voxel doses across a cohort and derive the slope.

    Each cohort entry is (grid, roi_source); a None source pools the whole
    volume. Doses are pooled in Gy (volumes weighted by their voxel count)
    before the margin fraction is computed.
    """
    if not cohort:
        raise ValueError("cohort must contain at least one volume")
    pools = []
    for grid, source in cohort:
        if source is None:
            pools.append(grid.values.ravel() * grid.unit_scale)
        else:
            pools.append(gather_roi_doses(grid, source) * grid.unit_scale)
    doses = np.concatenate(pools)
    q_m = margin_fraction_qm(doses, threshold_gy, margin_m)
    return SurrogateConfig(
        alpha=alpha_min(q_m, margin_m, eps),
        threshold=threshold_gy,
        margin_m=margin_m,
        tolerance_eps=eps,
        q_m=q_m,
        roi=roi_label,
    )
