"""Clinical DVH dose metrics, surrogate losses, and packed ROI masks."""

from .bitmask import (
    BitMaskVolume,
    MaskAccounting,
    VoxelPermutation,
    apply_permutation,
    encode,
)
from .loss import (
    CdmResult,
    FdReport,
    LossConfig,
    LossResult,
    MetricTerm,
    cdm_loss,
    finite_difference_check,
    mae_loss,
    total_loss,
)
from .metrics import (
    EmptyRoiError,
    MetricValue,
    cumulative_dvh,
    d_extrema,
    d_hottest_cc,
    d_mean,
    d_quantile_pct,
    evaluate_metric,
    gather_roi_doses,
    v_exact,
)
from .optimizer import (
    REFERENCE_PHANTOM,
    OptimizeResult,
    OptimizerConfig,
    PhantomRoi,
    PhantomSpec,
    make_initial_dose,
    make_phantom,
    min_constraint_margin,
    optimize_dose,
)
from .scoring import (
    CohortSummary,
    ScoreReport,
    WilcoxonResult,
    cohort_summary,
    constraint_report,
    score_pair,
    wilcoxon_signed_rank,
)
from .surrogate import (
    PAPER_ALPHA,
    InfeasibleToleranceError,
    SurrogateConfig,
    alpha_min,
    error_bound,
    margin_fraction_qm,
    pointwise_error,
    select_alpha_from_cohort,
    sigmoid_indicator,
    v_approx,
)
from .template import (
    Bound,
    MetricKind,
    MetricSpec,
    PlanTemplate,
    TemplateError,
    default_paper_template,
    parse_template,
)
from .volumes import (
    DoseGrid,
    RoiMask,
    VolumeFormatError,
    load_volume,
    rescale_dose,
    save_volume,
)

__version__ = "0.1.0"
