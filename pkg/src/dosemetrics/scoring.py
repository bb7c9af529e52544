"""Plan evaluation scores, constraint reports, and paired significance tests.

Scoring always uses exact metrics, never the surrogate: these numbers
mirror clinical plan review. PTV metrics are compared in percent of the
prescription, OAR metrics in Gy, and V-metrics in percent volume.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bitmask import BitMaskVolume
from .metrics import MetricValue, evaluate_metric
from .template import MetricSpec, PlanTemplate
from .volumes import DoseGrid

__all__ = [
    "MetricComparison",
    "ScoreReport",
    "ConstraintRow",
    "WilcoxonResult",
    "CohortSummary",
    "score_pair",
    "constraint_report",
    "wilcoxon_signed_rank",
    "cohort_summary",
    "reporting_unit",
    "to_reporting_unit",
    "bound_margin",
]

EXACT_MODE_MAX_N = 25  # exact signed-rank distribution up to this many pairs


def reporting_unit(spec: MetricSpec) -> str:
    if spec.metric.is_volume_metric:
        return "pct_volume"
    return "pct_presc" if spec.roi_class == "ptv" else "gy"


def to_reporting_unit(spec: MetricSpec, value: MetricValue | float,
                      prescriptions: dict[str, float]) -> float:
    """Convert a raw metric value (Gy or fraction) to the metric's reporting unit."""
    raw = value.value if isinstance(value, MetricValue) else float(value)
    unit = reporting_unit(spec)
    if unit == "pct_volume":
        return raw * 100.0
    if unit == "pct_presc":
        return raw / prescriptions[spec.roi] * 100.0
    return raw


def _in_bound_unit(spec: MetricSpec, raw: float, unit: str,
                   prescriptions: dict[str, float]) -> float:
    if unit == "pct_volume":
        return raw * 100.0
    if unit == "pct_presc":
        return raw / prescriptions[spec.roi] * 100.0
    return raw


def bound_margin(spec: MetricSpec, raw: float, bound,
                 prescriptions: dict[str, float]) -> float:
    """Signed slack of a bound in its own unit; positive means satisfied."""
    value = _in_bound_unit(spec, raw, bound.unit, prescriptions)
    return bound.value - value if bound.op == "<=" else value - bound.value


@dataclass(frozen=True)
class MetricComparison:
    spec: MetricSpec
    pred_value: float  # in the reporting unit
    gt_value: float
    abs_delta: float
    unit: str
    pred_aim_pass: bool | None
    pred_constraint_pass: bool | None
    gt_aim_pass: bool | None
    gt_constraint_pass: bool | None


@dataclass(frozen=True)
class ScoreReport:
    patient_id: str
    ptv_score: float  # percent of prescription
    oar_score: float  # Gy
    dose_score: float  # Gy
    per_metric: tuple[MetricComparison, ...]
    skipped_rois: tuple[str, ...] = ()


@dataclass(frozen=True)
class ConstraintRow:
    spec: MetricSpec
    value: float  # in the reporting unit
    unit: str
    value_gy_or_fraction: float
    aim_pass: bool | None
    constraint_pass: bool | None
    constraint_margin: float | None  # signed, in the constraint's unit
    clamped: bool = False


def _bound_pass(spec: MetricSpec, raw: float, bound,
                prescriptions: dict[str, float]) -> bool | None:
    if bound is None:
        return None
    return bound.satisfied_by(_in_bound_unit(spec, raw, bound.unit, prescriptions))


def _roi_values(
    dose: DoseGrid,
    rois: BitMaskVolume,
    template: PlanTemplate,
    empty_roi_policy: str,
) -> tuple[dict[tuple, MetricValue], list[str]]:
    values: dict[tuple, MetricValue] = {}
    skipped: list[str] = []
    for roi in template.roi_order:
        if rois.roi_voxel_count(roi) == 0:
            if empty_roi_policy == "error":
                raise ValueError(f"ROI {roi!r} is empty")
            skipped.append(roi)
            continue
        source = (rois, roi)
        for spec in template.specs_for_roi(roi):
            values[spec.key()] = evaluate_metric(dose, source, spec, template.prescriptions)
    return values, skipped


def score_pair(
    pred: DoseGrid,
    gt: DoseGrid,
    rois: BitMaskVolume,
    template: PlanTemplate,
    patient_id: str = "",
    empty_roi_policy: str = "skip",
) -> ScoreReport:
    """Evaluate the three template scores for a predicted/reference pair."""
    if pred.dims != gt.dims:
        raise ValueError(f"dims mismatch: pred {pred.dims} vs gt {gt.dims}")
    pred_values, skipped = _roi_values(pred, rois, template, empty_roi_policy)
    gt_values, _ = _roi_values(gt, rois, template, empty_roi_policy)

    comparisons: list[MetricComparison] = []
    for spec in template.specs:
        if spec.key() not in pred_values:
            continue
        pv, gv = pred_values[spec.key()], gt_values[spec.key()]
        pred_rep = to_reporting_unit(spec, pv, template.prescriptions)
        gt_rep = to_reporting_unit(spec, gv, template.prescriptions)
        comparisons.append(
            MetricComparison(
                spec=spec,
                pred_value=pred_rep,
                gt_value=gt_rep,
                abs_delta=abs(pred_rep - gt_rep),
                unit=reporting_unit(spec),
                pred_aim_pass=_bound_pass(spec, pv.value, spec.aim, template.prescriptions),
                pred_constraint_pass=_bound_pass(spec, pv.value, spec.constraint,
                                                 template.prescriptions),
                gt_aim_pass=_bound_pass(spec, gv.value, spec.aim, template.prescriptions),
                gt_constraint_pass=_bound_pass(spec, gv.value, spec.constraint,
                                               template.prescriptions),
            )
        )

    def class_score(roi_class: str, roi_set: tuple[str, ...]) -> float:
        per_roi = []
        for roi in roi_set:
            deltas = [c.abs_delta for c in comparisons if c.spec.roi == roi]
            if deltas:
                per_roi.append(float(np.mean(deltas)))
        return float(np.mean(per_roi)) if per_roi else 0.0

    dose_score = float(np.mean(np.abs(pred.values - gt.values))) * pred.unit_scale
    return ScoreReport(
        patient_id=patient_id,
        ptv_score=class_score("ptv", template.ptv_set),
        oar_score=class_score("oar", template.oar_set),
        dose_score=dose_score,
        per_metric=tuple(comparisons),
        skipped_rois=tuple(skipped),
    )


def constraint_report(
    dose: DoseGrid,
    rois: BitMaskVolume,
    template: PlanTemplate,
    empty_roi_policy: str = "skip",
) -> tuple[ConstraintRow, ...]:
    """Evaluate every aim and constraint against the exact metric values."""
    values, _ = _roi_values(dose, rois, template, empty_roi_policy)
    rows = []
    for spec in template.specs:
        if spec.key() not in values:
            continue
        mv = values[spec.key()]
        margin = None
        if spec.constraint is not None:
            margin = bound_margin(spec, mv.value, spec.constraint, template.prescriptions)
        rows.append(
            ConstraintRow(
                spec=spec,
                value=to_reporting_unit(spec, mv, template.prescriptions),
                unit=reporting_unit(spec),
                value_gy_or_fraction=mv.value,
                aim_pass=_bound_pass(spec, mv.value, spec.aim, template.prescriptions),
                constraint_pass=_bound_pass(spec, mv.value, spec.constraint,
                                            template.prescriptions),
                constraint_margin=margin,
                clamped=mv.clamped,
            )
        )
    return tuple(rows)


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float  # W = min(W+, W-) over nonzero differences
    p_value: float  # two-tailed
    n_effective: int
    method: str  # "exact" | "approx" | "degenerate"
    degenerate: bool = False


def _midranks(magnitudes: np.ndarray) -> np.ndarray:
    """Average ranks of |differences|, ties mid-ranked."""
    order = np.argsort(magnitudes, kind="stable")
    ranks = np.empty(magnitudes.size, dtype=np.float64)
    sorted_m = magnitudes[order]
    i = 0
    while i < sorted_m.size:
        j = i
        while j + 1 < sorted_m.size and sorted_m[j + 1] == sorted_m[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _exact_wplus_distribution(ranks: np.ndarray) -> np.ndarray:
    """Counts of each achievable doubled W+ over all 2^n sign patterns."""
    doubled = np.rint(ranks * 2).astype(np.int64)
    counts = np.zeros(int(doubled.sum()) + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: counts.size - r]
        counts += shifted
    return counts


def wilcoxon_signed_rank(pairs) -> WilcoxonResult:
    """Two-tailed Wilcoxon signed-rank test on paired metric values.

    Zero differences are dropped; ties of |difference| are mid-ranked. The
    exact permutation distribution is used up to 25 effective pairs, the
    normal approximation with tie correction beyond. All-zero differences
    give the degenerate p = 1 with a flag.
    """
    arr = np.asarray(pairs, dtype=np.float64)
    if arr.ndim == 2 and arr.shape[1] == 2:
        diffs = arr[:, 0] - arr[:, 1]
    elif arr.ndim == 1:
        diffs = arr
    else:
        raise ValueError("pairs must be (n, 2) pairs or a 1D difference array")
    if diffs.size == 0:
        raise ValueError("need at least one pair")

    diffs = diffs[diffs != 0.0]
    n = diffs.size
    if n == 0:
        return WilcoxonResult(statistic=0.0, p_value=1.0, n_effective=0,
                              method="degenerate", degenerate=True)

    ranks = _midranks(np.abs(diffs))
    w_plus = float(ranks[diffs > 0].sum())
    w_minus = float(ranks[diffs < 0].sum())
    statistic = min(w_plus, w_minus)

    if n <= EXACT_MODE_MAX_N:
        counts = _exact_wplus_distribution(ranks)
        total = counts.sum()
        w2 = int(round(w_plus * 2))
        p_low = counts[: w2 + 1].sum() / total
        p_high = counts[w2:].sum() / total
        p = min(1.0, 2.0 * min(p_low, p_high))
        return WilcoxonResult(statistic=statistic, p_value=float(p),
                              n_effective=n, method="exact")

    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    _, tie_counts = np.unique(np.abs(diffs), return_counts=True)
    var -= float(np.sum(tie_counts**3 - tie_counts)) / 48.0
    z = (w_plus - mean) / math.sqrt(var)
    p = math.erfc(abs(z) / math.sqrt(2.0))
    return WilcoxonResult(statistic=statistic, p_value=float(p),
                          n_effective=n, method="approx")


@dataclass(frozen=True)
class CohortSummary:
    n_cases: int
    ptv_score_mean: float
    ptv_score_sd: float
    oar_score_mean: float
    oar_score_sd: float
    dose_score_mean: float
    dose_score_sd: float
    sd_defined: bool  # False for a single case (sd reported as 0 by convention)
    aim_pass_rate: dict[str, float]
    constraint_pass_rate: dict[str, float]


def _mean_sd(values: list[float]) -> tuple[float, float]:
    if len(values) < 2:
        return float(values[0]), 0.0
    return float(np.mean(values)), float(np.std(values, ddof=1))


def cohort_summary(reports: list[ScoreReport]) -> CohortSummary:
    """Mean and sample standard deviation per score, plus pass rates."""
    if not reports:
        raise ValueError("need at least one report")
    reports = sorted(reports, key=lambda r: r.patient_id)
    ptv_m, ptv_s = _mean_sd([r.ptv_score for r in reports])
    oar_m, oar_s = _mean_sd([r.oar_score for r in reports])
    dose_m, dose_s = _mean_sd([r.dose_score for r in reports])

    aim_rate: dict[str, float] = {}
    con_rate: dict[str, float] = {}
    labels: dict[str, None] = {}
    for r in reports:
        for c in r.per_metric:
            labels.setdefault(c.spec.label(), None)
    for label in labels:
        aims = [c.pred_aim_pass for r in reports for c in r.per_metric
                if c.spec.label() == label and c.pred_aim_pass is not None]
        cons = [c.pred_constraint_pass for r in reports for c in r.per_metric
                if c.spec.label() == label and c.pred_constraint_pass is not None]
        if aims:
            aim_rate[label] = float(np.mean(aims))
        if cons:
            con_rate[label] = float(np.mean(cons))

    return CohortSummary(
        n_cases=len(reports),
        ptv_score_mean=ptv_m, ptv_score_sd=ptv_s,
        oar_score_mean=oar_m, oar_score_sd=oar_s,
        dose_score_mean=dose_m, dose_score_sd=dose_s,
        sd_defined=len(reports) >= 2,
        aim_pass_rate=aim_rate,
        constraint_pass_rate=con_rate,
    )
