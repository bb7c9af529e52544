"""Template-driven metric loss with analytic voxel gradients.

The loss compares predicted and reference dose volumes through every
metric in the plan template (weighted absolute differences), adds a
voxel-wise MAE term, and combines them as
``l_total = lambda_mae * l_mae + lambda_cdm * l_cdm``.

Gradients are exact subgradients with sign(0) = 0: mean terms spread
w * sign / N over the ROI, selection terms (quantile, hottest-cc, max,
min) place w * sign on the single selected voxel (smallest z-major index
among ties), and surrogate V terms contribute the sigmoid slope per ROI
voxel. ROIs are decoded from the packed mask one at a time and released
before the next, which keeps at most one decoded mask alive.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .bitmask import BitMaskVolume, MaskAccounting
from .metrics import (
    EmptyRoiError,
    hottest_cc_rank,
    kth_largest,
    kth_largest_position,
    quantile_rank,
    v_exact,
)
from .surrogate import (
    DEFAULT_MARGIN_GY,
    DEFAULT_TOLERANCE,
    PAPER_ALPHA,
    SurrogateConfig,
    select_alpha_from_cohort,
    sigmoid_indicator,
)
from .template import MetricSpec, PlanTemplate
from .volumes import DoseGrid

__all__ = [
    "LossConfig",
    "MetricTerm",
    "TermGradient",
    "CdmResult",
    "LossResult",
    "FdProbe",
    "FdReport",
    "mae_loss",
    "cdm_loss",
    "cdm_term_gradients",
    "total_loss",
    "finite_difference_check",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    """Everything the loss needs beyond the two dose volumes."""

    template: PlanTemplate
    surrogates: dict[tuple, SurrogateConfig]  # keyed by MetricSpec.key()
    lambda_mae: float
    lambda_cdm: float
    use_surrogate_for_gt: bool = True
    empty_roi_policy: str = "skip"  # "skip" | "error"

    def __post_init__(self) -> None:
        if self.empty_roi_policy not in ("skip", "error"):
            raise ValueError(f"unknown empty-ROI policy {self.empty_roi_policy!r}")
        for spec in self.template.specs:
            if spec.metric.is_volume_metric and spec.key() not in self.surrogates:
                raise ValueError(f"missing surrogate config for {spec.label()}")

    @classmethod
    def for_template(
        cls,
        template: PlanTemplate,
        *,
        alpha_by_roi: dict[str, float] | None = None,
        cohort: list[tuple[DoseGrid, BitMaskVolume]] | None = None,
        margin_m: float = DEFAULT_MARGIN_GY,
        tolerance_eps: float = DEFAULT_TOLERANCE,
        lambda_mae: float | None = None,
        lambda_cdm: float | None = None,
        use_surrogate_for_gt: bool = True,
        empty_roi_policy: str = "skip",
    ) -> "LossConfig":
        """Build a config, resolving one surrogate slope per V-metric spec.

        Slope resolution order: explicit ``alpha_by_roi`` entry, then
        derivation from ``cohort`` (dose + packed-mask pairs), then the
        published per-ROI constants.
        """
        surrogates: dict[tuple, SurrogateConfig] = {}
        for spec in template.specs:
            if not spec.metric.is_volume_metric:
                continue
            if spec.metric.kind == "V_pct":
                threshold = spec.metric.param / 100.0 * template.prescription_for(spec.roi)
            else:
                threshold = spec.metric.param
            if alpha_by_roi and spec.roi in alpha_by_roi:
                cfg = SurrogateConfig(
                    alpha=alpha_by_roi[spec.roi],
                    threshold=threshold,
                    margin_m=margin_m,
                    tolerance_eps=tolerance_eps,
                    roi=spec.roi,
                )
            elif cohort is not None:
                cfg = select_alpha_from_cohort(
                    [(grid, (rois, spec.roi)) for grid, rois in cohort],
                    threshold_gy=threshold,
                    margin_m=margin_m,
                    eps=tolerance_eps,
                    roi_label=spec.roi,
                )
            elif spec.roi in PAPER_ALPHA:
                cfg = SurrogateConfig(
                    alpha=PAPER_ALPHA[spec.roi],
                    threshold=threshold,
                    margin_m=margin_m,
                    tolerance_eps=tolerance_eps,
                    roi=spec.roi,
                )
            else:
                raise ValueError(
                    f"no surrogate slope for {spec.label()}: pass alpha_by_roi or a cohort"
                )
            surrogates[spec.key()] = cfg
        return cls(
            template=template,
            surrogates=surrogates,
            lambda_mae=template.lambda_mae if lambda_mae is None else lambda_mae,
            lambda_cdm=template.lambda_cdm if lambda_cdm is None else lambda_cdm,
            use_surrogate_for_gt=use_surrogate_for_gt,
            empty_roi_policy=empty_roi_policy,
        )


@dataclass(frozen=True)
class MetricTerm:
    spec: MetricSpec
    m_pred: float
    m_gt: float
    weighted_delta: float  # loss_weight * |m_pred - m_gt|


@dataclass(frozen=True)
class TermGradient:
    """One metric term's exact gradient support: values at member voxels.

    The term's contribution to the full gradient is
    ``loss_weight * sign(m_pred - m_gt) * values`` scattered onto
    ``member`` (z-major linear indices). Mean and surrogate terms carry
    all ROI members; selection terms carry the single selected voxel.
    """

    spec: MetricSpec
    m_pred: float
    m_gt: float
    member: np.ndarray  # int64 linear indices
    values: np.ndarray  # float64, same length as member

    @property
    def delta(self) -> float:
        return self.m_pred - self.m_gt


@dataclass(frozen=True)
class CdmResult:
    value: float
    terms: tuple[MetricTerm, ...]
    gradient: np.ndarray | None
    skipped_rois: tuple[str, ...] = ()


@dataclass(frozen=True)
class LossResult:
    l_cdm: float
    l_mae: float
    l_total: float  # exactly lambda_mae * l_mae + lambda_cdm * l_cdm
    per_metric: tuple[MetricTerm, ...]
    gradient: np.ndarray | None
    skipped_rois: tuple[str, ...] = ()


def _check_pair(pred: DoseGrid, gt: DoseGrid) -> None:
    if pred.dims != gt.dims:
        raise ValueError(f"dims mismatch: pred {pred.dims} vs gt {gt.dims}")
    if pred.unit_scale != gt.unit_scale:
        raise ValueError(
            f"unit_scale mismatch: pred {pred.unit_scale} vs gt {gt.unit_scale}"
        )


def mae_loss(
    pred: DoseGrid, gt: DoseGrid, with_grad: bool = False
) -> tuple[float, np.ndarray | None]:
    """Mean absolute voxel error over the whole grid, in native units.

    Gradient is sign(pred - gt) / |volume| with sign(0) = 0.
    """
    _check_pair(pred, gt)
    diff = pred.values - gt.values
    value = float(np.mean(np.abs(diff)))
    grad = np.sign(diff) / diff.size if with_grad else None
    return value, grad


def _sign(x: float) -> float:
    return float(np.sign(x))


def cdm_term_gradients(
    pred: DoseGrid,
    gt: DoseGrid,
    rois: BitMaskVolume,
    cfg: LossConfig,
    with_grad: bool = True,
    accounting: MaskAccounting | None = None,
) -> tuple[list[TermGradient], list[str]]:
    """Evaluate every template metric term and its gradient support.

    ROIs are decoded one at a time and released before the next. When
    ``with_grad`` is false the gradient supports are left empty and only
    the metric values are computed.
    """
    _check_pair(pred, gt)
    if rois.dims != pred.dims:
        raise ValueError(f"mask dims {rois.dims} do not match dose dims {pred.dims}")

    scale = pred.unit_scale
    voxel_cc = pred.voxel_volume_cc
    pred_flat = pred.values.ravel()
    gt_flat = gt.values.ravel()
    empty_idx = np.empty(0, dtype=np.int64)
    empty_val = np.empty(0, dtype=np.float64)
    by_key: dict[tuple, TermGradient] = {}
    skipped: list[str] = []

    for roi in cfg.template.roi_order:
        specs = cfg.template.specs_for_roi(roi)
        mask = rois.decode(roi, accounting)
        try:
            member = np.flatnonzero(mask.occupancy.ravel())
            if member.size == 0:
                if cfg.empty_roi_policy == "error":
                    raise EmptyRoiError(f"ROI {roi!r} is empty")
                logger.warning("skipping empty ROI %r in loss evaluation", roi)
                skipped.append(roi)
                continue
            n = member.size
            pred_d = pred_flat[member]
            gt_d = gt_flat[member]

            for spec in specs:
                kind = spec.metric.kind
                idx, values = empty_idx, empty_val
                if kind == "D_mean":
                    m_p = float(pred_d.mean())
                    m_g = float(gt_d.mean())
                    if with_grad:
                        idx = member
                        values = np.full(n, 1.0 / n)
                elif kind in ("D_max", "D_min", "D_pct", "D_cc"):
                    if kind == "D_max":
                        k = 1
                    elif kind == "D_min":
                        k = n
                    elif kind == "D_pct":
                        k = quantile_rank(spec.metric.param, n)
                    else:
                        k, _ = hottest_cc_rank(spec.metric.param, voxel_cc, n)
                    m_p = kth_largest(pred_d, k)
                    m_g = kth_largest(gt_d, k)
                    if with_grad:
                        sel = kth_largest_position(pred_d, k)
                        idx = member[sel : sel + 1]
                        values = np.ones(1)
                else:  # V_pct / V_gy via the sigmoid surrogate
                    scfg = cfg.surrogates[spec.key()]
                    threshold = scfg.threshold / scale
                    alpha = scfg.alpha * scale  # keep the surrogate unit-invariant
                    s_pred = sigmoid_indicator(pred_d - threshold, alpha)
                    m_p = float(np.mean(s_pred))
                    if cfg.use_surrogate_for_gt:
                        m_g = float(np.mean(sigmoid_indicator(gt_d - threshold, alpha)))
                    else:
                        m_g = v_exact(gt_d, threshold)
                    if with_grad:
                        idx = member
                        values = (alpha / n) * s_pred * (1.0 - s_pred)
                by_key[spec.key()] = TermGradient(
                    spec=spec, m_pred=m_p, m_gt=m_g, member=idx, values=values
                )
        finally:
            if accounting is not None:
                accounting.note_release()
            del mask

    # template order, for bitwise-reproducible sums downstream
    ordered = [by_key[s.key()] for s in cfg.template.specs if s.key() in by_key]
    return ordered, skipped


def cdm_loss(
    pred: DoseGrid,
    gt: DoseGrid,
    rois: BitMaskVolume,
    cfg: LossConfig,
    with_grad: bool = False,
    accounting: MaskAccounting | None = None,
) -> CdmResult:
    """Weighted sum of absolute metric differences over the template."""
    pieces, skipped = cdm_term_gradients(
        pred, gt, rois, cfg, with_grad=with_grad, accounting=accounting
    )
    grad = np.zeros(pred.values.size, dtype=np.float64) if with_grad else None
    terms = []
    value = 0.0
    for piece in pieces:
        w = piece.spec.loss_weight
        terms.append(
            MetricTerm(
                spec=piece.spec, m_pred=piece.m_pred, m_gt=piece.m_gt,
                weighted_delta=w * abs(piece.delta),
            )
        )
        value += w * abs(piece.delta)
        if grad is not None and piece.delta != 0.0:
            grad[piece.member] += (w * _sign(piece.delta)) * piece.values
    return CdmResult(
        value=value,
        terms=tuple(terms),
        gradient=grad.reshape(pred.values.shape) if grad is not None else None,
        skipped_rois=tuple(skipped),
    )


def total_loss(
    pred: DoseGrid,
    gt: DoseGrid,
    rois: BitMaskVolume,
    cfg: LossConfig,
    with_grad: bool = False,
    accounting: MaskAccounting | None = None,
) -> LossResult:
    """Combined loss lambda_mae * MAE + lambda_cdm * metric loss."""
    mae_value, mae_grad = mae_loss(pred, gt, with_grad=with_grad)
    cdm = cdm_loss(pred, gt, rois, cfg, with_grad=with_grad, accounting=accounting)
    gradient = None
    if with_grad:
        gradient = cfg.lambda_mae * mae_grad + cfg.lambda_cdm * cdm.gradient
    return LossResult(
        l_cdm=cdm.value,
        l_mae=mae_value,
        l_total=cfg.lambda_mae * mae_value + cfg.lambda_cdm * cdm.value,
        per_metric=cdm.terms,
        gradient=gradient,
        skipped_rois=cdm.skipped_rois,
    )


@dataclass(frozen=True)
class FdProbe:
    voxel: int  # z-major linear index
    category: str  # "smooth" | "kink" | "saturated" | "boundary"
    analytic: float
    fd: float
    rel_error: float


@dataclass(frozen=True)
class FdReport:
    max_rel_error: float
    mean_rel_error: float
    n_smooth: int
    n_kink: int
    n_saturated: int
    n_boundary: int
    probes: tuple[FdProbe, ...]


_SATURATION_LOGIT = 30.0


def _classify_probe(
    voxel: int,
    pred: DoseGrid,
    gt: DoseGrid,
    rois: BitMaskVolume,
    cfg: LossConfig,
    base: LossResult,
    step_h: float,
) -> str:
    """Sort a probe voxel into smooth / kink / saturated / boundary."""
    pred_flat = pred.values.ravel()
    gt_flat = gt.values.ravel()
    d = pred_flat[voxel]
    if d < step_h:
        return "boundary"  # central difference would leave the nonnegative domain
    if cfg.lambda_mae > 0 and abs(d - gt_flat[voxel]) <= 2 * step_h:
        return "kink"  # probing crosses the |pred - gt| corner
    if cfg.lambda_cdm == 0.0:
        return "smooth"  # metric terms carry no weight, only the MAE matters

    scale = pred.unit_scale
    voxel_cc = pred.voxel_volume_cc
    terms = {t.spec.key(): t for t in base.per_metric}
    has_saturated_term = False
    for roi in cfg.template.roi_order:
        occ = rois.decode(roi).occupancy.ravel()
        if not occ[voxel]:
            continue
        member = np.flatnonzero(occ)
        pred_d = pred_flat[member]
        n = member.size
        for spec in cfg.template.specs_for_roi(roi):
            term = terms.get(spec.key())
            if term is None:
                continue
            kind = spec.metric.kind
            delta = term.m_pred - term.m_gt
            if delta == 0.0:
                return "kink"  # |delta| is cornered at zero
            if kind == "D_mean":
                sens = step_h / n
            elif kind in ("D_max", "D_min", "D_pct", "D_cc"):
                if kind == "D_max":
                    k = 1
                elif kind == "D_min":
                    k = n
                elif kind == "D_pct":
                    k = quantile_rank(spec.metric.param, n)
                else:
                    k, _ = hottest_cc_rank(spec.metric.param, voxel_cc, n)
                sel_value = kth_largest(pred_d, k)
                if abs(d - sel_value) <= 2 * step_h:
                    if d != sel_value:
                        return "kink"  # probe can displace the selected rank
                    others = np.delete(pred_d, int(np.flatnonzero(pred_d == d)[0]))
                    if others.size and np.abs(others - d).min() <= 2 * step_h:
                        return "kink"  # rank can change hands while probing
                    sens = step_h  # probe is the uniquely selected voxel
                else:
                    sens = 0.0  # term does not respond to this voxel
            else:  # V surrogate
                scfg = cfg.surrogates[spec.key()]
                alpha = scfg.alpha * scale
                z = d - scfg.threshold / scale
                if abs(alpha * z) > _SATURATION_LOGIT:
                    has_saturated_term = True
                    continue
                sens = step_h * alpha / (4.0 * n)
            if abs(delta) <= 4.0 * sens:
                return "kink"  # the term's sign may flip inside the probe step
    if has_saturated_term and abs(base.gradient.ravel()[voxel]) < 1e-9:
        return "saturated"
    return "smooth"


def finite_difference_check(
    pred: DoseGrid,
    gt: DoseGrid,
    rois: BitMaskVolume,
    cfg: LossConfig,
    probe_count: int = 64,
    step_h: float = 1e-4,
    seed: int = 0,
    include_voxels: tuple[int, ...] = (),
) -> FdReport:
    """Compare analytic gradients against central finite differences.

    Probes are sampled from the union of template ROI voxels (falling back
    to the whole grid); kinked, saturated, and domain-boundary voxels are
    classified and reported separately from the smooth headline numbers.
    ``include_voxels`` forces specific linear indices into the probe set.
    """
    base = total_loss(pred, gt, rois, cfg, with_grad=True)
    grad_flat = base.gradient.ravel()

    union = np.zeros(pred.voxel_count, dtype=bool)
    for roi in cfg.template.roi_order:
        union |= rois.decode(roi).occupancy.ravel()
    candidates = np.flatnonzero(union)
    if candidates.size == 0:
        candidates = np.arange(pred.voxel_count)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(candidates, size=min(probe_count, candidates.size), replace=False)
    if include_voxels:
        chosen = np.unique(np.concatenate([chosen, np.asarray(include_voxels)]))

    probes: list[FdProbe] = []
    vals = pred.values.ravel()
    # below this scale a central difference only measures float64 evaluation
    # noise, so agreement between two such gradients is not checkable
    fd_noise_floor = 1e-13 * max(1.0, abs(base.l_total)) / step_h
    for voxel in sorted(int(v) for v in chosen):
        category = _classify_probe(voxel, pred, gt, rois, cfg, base, step_h)
        fd = float("nan")
        rel = float("nan")
        if category in ("smooth", "kink", "saturated"):
            lo = vals.copy()
            hi = vals.copy()
            hi[voxel] += step_h
            lo[voxel] -= step_h
            if lo[voxel] < 0:
                category = "boundary"
            else:
                up = DoseGrid(pred.dims, pred.spacing_mm, hi.reshape(pred.values.shape),
                              pred.unit_scale)
                dn = DoseGrid(pred.dims, pred.spacing_mm, lo.reshape(pred.values.shape),
                              pred.unit_scale)
                l_up = total_loss(up, gt, rois, cfg).l_total
                l_dn = total_loss(dn, gt, rois, cfg).l_total
                fd = (l_up - l_dn) / (2.0 * step_h)
                a = float(grad_flat[voxel])
                denom = max(abs(a), abs(fd))
                rel = 0.0 if denom < fd_noise_floor else abs(a - fd) / denom
        probes.append(
            FdProbe(voxel=voxel, category=category,
                    analytic=float(grad_flat[voxel]), fd=fd, rel_error=rel)
        )

    smooth = [p.rel_error for p in probes if p.category == "smooth"]
    return FdReport(
        max_rel_error=max(smooth) if smooth else 0.0,
        mean_rel_error=float(np.mean(smooth)) if smooth else 0.0,
        n_smooth=len(smooth),
        n_kink=sum(p.category == "kink" for p in probes),
        n_saturated=sum(p.category == "saturated" for p in probes),
        n_boundary=sum(p.category == "boundary" for p in probes),
        probes=tuple(probes),
    )
