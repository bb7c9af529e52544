"""Clinical plan-evaluation template: parsing, validation, defaults.

A template lists the prescriptions, the per-ROI metric specs with their
aims/constraints, and the loss weights. It is the single source of truth
driving both the metric loss and the scoring reports, so everything is
validated here once and treated as immutable afterwards.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

__all__ = [
    "TemplateError",
    "MetricKind",
    "Bound",
    "MetricSpec",
    "PlanTemplate",
    "parse_template",
    "default_paper_template",
    "MAX_ROIS",
]

MAX_ROIS = 32  # bit-mask compatibility

# kind name -> (needs param, param constraint description)
_KINDS = {
    "D_mean": False,
    "D_max": False,
    "D_min": False,
    "D_pct": True,   # percent in (0, 100]
    "D_cc": True,    # cc > 0
    "V_pct": True,   # percent of prescription, > 0
    "V_gy": True,    # Gy > 0
}

_UNITS = ("pct_presc", "gy", "pct_volume")
_OPS = ("<=", ">=")


class TemplateError(ValueError):
    """Raised for schema violations and inconsistent template content."""


@dataclass(frozen=True)
class MetricKind:
    kind: str
    param: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in _KINDS:
            raise TemplateError(f"unknown metric kind {self.kind!r}")
        needs_param = _KINDS[self.kind]
        if needs_param and self.param is None:
            raise TemplateError(f"metric {self.kind} requires a parameter")
        if not needs_param and self.param is not None:
            raise TemplateError(f"metric {self.kind} takes no parameter")
        if self.param is not None:
            p = float(self.param)
            if p <= 0:
                raise TemplateError(f"metric {self.kind} parameter must be positive, got {p}")
            if self.kind == "D_pct" and p > 100:
                raise TemplateError(f"D_pct parameter must be in (0, 100], got {p}")
            object.__setattr__(self, "param", p)

    @property
    def is_volume_metric(self) -> bool:
        return self.kind in ("V_pct", "V_gy")

    def label(self) -> str:
        if self.param is None:
            return self.kind
        return f"{self.kind}_{self.param:g}"


@dataclass(frozen=True)
class Bound:
    op: str  # "<=" or ">="
    value: float
    unit: str  # "pct_presc" | "gy" | "pct_volume"

    def __post_init__(self) -> None:
        if self.op not in _OPS:
            raise TemplateError(f"bound op must be one of {_OPS}, got {self.op!r}")
        if self.unit not in _UNITS:
            raise TemplateError(f"bound unit must be one of {_UNITS}, got {self.unit!r}")
        object.__setattr__(self, "value", float(self.value))

    def satisfied_by(self, value: float) -> bool:
        # boundary comparisons are inclusive, as written in the template
        return value <= self.value if self.op == "<=" else value >= self.value


@dataclass(frozen=True)
class MetricSpec:
    roi: str
    roi_class: str  # "ptv" | "oar"
    metric: MetricKind
    aim: Bound | None = None
    constraint: Bound | None = None
    loss_weight: float = 1.0

    def __post_init__(self) -> None:
        if self.roi_class not in ("ptv", "oar"):
            raise TemplateError(f"roi class must be 'ptv' or 'oar', got {self.roi_class!r}")
        if self.aim is None and self.constraint is None:
            raise TemplateError(f"spec {self.roi}/{self.metric.label()} has neither aim nor constraint")
        if self.loss_weight < 0:
            raise TemplateError(f"loss_weight must be nonnegative, got {self.loss_weight}")

    def key(self) -> tuple:
        return (self.roi, self.metric.kind, self.metric.param)

    def label(self) -> str:
        return f"{self.roi}:{self.metric.label()}"


@dataclass(frozen=True)
class PlanTemplate:
    prescriptions: dict[str, float]
    specs: tuple[MetricSpec, ...]
    lambda_mae: float = 1.0
    lambda_cdm: float = 0.5

    def __post_init__(self) -> None:
        object.__setattr__(self, "prescriptions", dict(self.prescriptions))
        object.__setattr__(self, "specs", tuple(self.specs))
        if self.lambda_mae < 0 or self.lambda_cdm < 0:
            raise TemplateError("loss balance weights must be nonnegative")
        _validate(self)

    @property
    def ptv_set(self) -> tuple[str, ...]:
        return _ordered_rois(self.specs, "ptv")

    @property
    def oar_set(self) -> tuple[str, ...]:
        return _ordered_rois(self.specs, "oar")

    @property
    def roi_order(self) -> tuple[str, ...]:
        """Distinct ROIs in template order; fixes bit-mask bit assignment."""
        seen: dict[str, None] = {}
        for s in self.specs:
            seen.setdefault(s.roi, None)
        return tuple(seen)

    def specs_for_roi(self, roi: str) -> tuple[MetricSpec, ...]:
        return tuple(s for s in self.specs if s.roi == roi)

    def prescription_for(self, roi: str) -> float:
        try:
            return self.prescriptions[roi]
        except KeyError:
            raise TemplateError(f"ROI {roi!r} has no prescription") from None

    def to_json_text(self) -> str:
        doc = {
            "prescriptions": {k: float(v) for k, v in self.prescriptions.items()},
            "lambda": {"mae": self.lambda_mae, "cdm": self.lambda_cdm},
            "specs": [_spec_to_obj(s) for s in self.specs],
        }
        return json.dumps(doc, indent=1)


def _ordered_rois(specs, roi_class: str) -> tuple[str, ...]:
    seen: dict[str, None] = {}
    for s in specs:
        if s.roi_class == roi_class:
            seen.setdefault(s.roi, None)
    return tuple(seen)


def _spec_to_obj(s: MetricSpec) -> dict:
    obj: dict = {
        "roi": s.roi,
        "class": s.roi_class,
        "metric": {"kind": s.metric.kind},
    }
    if s.metric.param is not None:
        obj["metric"]["param"] = s.metric.param
    for name, bound in (("aim", s.aim), ("constraint", s.constraint)):
        if bound is not None:
            obj[name] = {"op": bound.op, "value": bound.value, "unit": bound.unit}
    obj["loss_weight"] = s.loss_weight
    return obj


def _validate(t: PlanTemplate) -> None:
    for name, presc in t.prescriptions.items():
        if not presc > 0:
            raise TemplateError(f"prescription for {name!r} must be positive, got {presc}")

    classes: dict[str, str] = {}
    seen_keys: set[tuple] = set()
    for s in t.specs:
        prev = classes.setdefault(s.roi, s.roi_class)
        if prev != s.roi_class:
            raise TemplateError(f"ROI {s.roi!r} appears as both ptv and oar")
        if s.key() in seen_keys:
            raise TemplateError(f"duplicate spec for {s.label()}")
        seen_keys.add(s.key())

        needs_presc = s.metric.kind == "V_pct" or any(
            b is not None and b.unit == "pct_presc" for b in (s.aim, s.constraint)
        )
        if needs_presc and s.roi not in t.prescriptions:
            raise TemplateError(
                f"spec {s.label()} needs a prescription but ROI {s.roi!r} has none"
            )
        if s.metric.is_volume_metric:
            for b in (s.aim, s.constraint):
                if b is not None and b.unit != "pct_volume":
                    raise TemplateError(
                        f"spec {s.label()}: volume-metric bounds must use pct_volume"
                    )

    if len(classes) > MAX_ROIS:
        raise TemplateError(f"{len(classes)} ROIs exceed the bit-mask limit of {MAX_ROIS}")


def _parse_bound(obj, where: str) -> Bound:
    if not isinstance(obj, dict):
        raise TemplateError(f"{where}: bound must be an object")
    try:
        return Bound(op=obj["op"], value=obj["value"], unit=obj["unit"])
    except KeyError as exc:
        raise TemplateError(f"{where}: bound missing field {exc.args[0]!r}") from None


def _expand_paired(obj: dict) -> list[dict]:
    """Expand a '(L/R)' ROI shorthand into independent left/right specs."""
    roi = obj["roi"]
    if "(L/R)" not in roi:
        return [obj]
    out = []
    for side in ("L", "R"):
        o = dict(obj)
        o["roi"] = roi.replace("(L/R)", side)
        out.append(o)
    return out


def parse_template(json_text: str) -> PlanTemplate:
    """Parse and fully validate a template JSON document."""
    try:
        doc = json.loads(json_text)
    except json.JSONDecodeError as exc:
        raise TemplateError(f"template is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise TemplateError("template root must be a JSON object")

    prescriptions = doc.get("prescriptions", {})
    if not isinstance(prescriptions, dict):
        raise TemplateError("'prescriptions' must be an object")
    prescriptions = {str(k): float(v) for k, v in prescriptions.items()}

    lam = doc.get("lambda", {})
    if not isinstance(lam, dict):
        raise TemplateError("'lambda' must be an object")
    lambda_mae = float(lam.get("mae", 1.0))
    lambda_cdm = float(lam.get("cdm", 0.5))

    raw_specs = doc.get("specs")
    if not isinstance(raw_specs, list) or not raw_specs:
        raise TemplateError("'specs' must be a non-empty list")

    specs: list[MetricSpec] = []
    for raw in raw_specs:
        if not isinstance(raw, dict):
            raise TemplateError("each spec must be a JSON object")
        for key in ("roi", "class", "metric"):
            if key not in raw:
                raise TemplateError(f"spec missing field {key!r}: {raw}")
        for expanded in _expand_paired(raw):
            where = f"spec {expanded['roi']}"
            metric_obj = expanded["metric"]
            if not isinstance(metric_obj, dict) or "kind" not in metric_obj:
                raise TemplateError(f"{where}: metric must be an object with a 'kind'")
            metric = MetricKind(kind=metric_obj["kind"], param=metric_obj.get("param"))
            aim = _parse_bound(expanded["aim"], where) if expanded.get("aim") else None
            constraint = (
                _parse_bound(expanded["constraint"], where) if expanded.get("constraint") else None
            )
            specs.append(
                MetricSpec(
                    roi=str(expanded["roi"]),
                    roi_class=str(expanded["class"]),
                    metric=metric,
                    aim=aim,
                    constraint=constraint,
                    loss_weight=float(expanded.get("loss_weight", 1.0)),
                )
            )

    return PlanTemplate(
        prescriptions=prescriptions,
        specs=tuple(specs),
        lambda_mae=lambda_mae,
        lambda_cdm=lambda_cdm,
    )


def _row(roi, cls, kind, param=None, aim=None, constraint=None, weight=None):
    obj = {"roi": roi, "class": cls, "metric": {"kind": kind}}
    if param is not None:
        obj["metric"]["param"] = param
    if aim is not None:
        op, value, unit = aim
        obj["aim"] = {"op": op, "value": value, "unit": unit}
    if constraint is not None:
        op, value, unit = constraint
        obj["constraint"] = {"op": op, "value": value, "unit": unit}
    obj["loss_weight"] = weight if weight is not None else (1.0 if cls == "ptv" else 0.1)
    return obj


def default_paper_template() -> PlanTemplate:
    """The full head-and-neck evaluation template with default weights.

    PTV metric weights default to 1.0 and OAR weights to 0.1; the balance
    weights default to mae=1.0, cdm=0.5.
    """
    rows = [
        _row("PTV_54.25", "ptv", "V_pct", 95.0, constraint=(">=", 98.0, "pct_volume")),
        _row("PTV_54.25", "ptv", "D_mean", aim=("<=", 102.0, "pct_presc")),
        _row("PTV_70", "ptv", "V_pct", 95.0, constraint=(">=", 98.0, "pct_volume")),
        _row("PTV_70", "ptv", "D_cc", 0.03,
             aim=("<=", 107.0, "pct_presc"), constraint=("<=", 110.0, "pct_presc")),
        _row("PTV_70", "ptv", "D_mean", aim=("<=", 102.0, "pct_presc")),
        _row("SpinalCord", "oar", "D_cc", 0.03, constraint=("<=", 50.0, "gy")),
        _row("SpinalCord+3mm", "oar", "D_cc", 0.03, constraint=("<=", 52.0, "gy")),
        _row("Brainstem_Surf", "oar", "D_cc", 0.03, constraint=("<=", 60.0, "gy")),
        _row("Brainstem_Core", "oar", "D_cc", 0.03, constraint=("<=", 54.0, "gy")),
        _row("Brain", "oar", "D_cc", 0.03, aim=("<=", 65.0, "gy")),
        _row("Brain", "oar", "D_pct", 2.0, aim=("<=", 70.0, "gy")),
        _row("Cochlea_(L/R)", "oar", "D_mean", aim=("<=", 45.0, "gy")),
        _row("Parotid_(L/R)", "oar", "D_mean", aim=("<=", 28.0, "gy")),
        _row("Glnd_Submand_(L/R)", "oar", "D_mean", aim=("<=", 35.0, "gy")),
        _row("Oral_Cavity", "oar", "D_mean", aim=("<=", 28.0, "gy")),
        _row("Musc_Constrict_S", "oar", "D_mean", aim=("<=", 40.0, "gy")),
        _row("Musc_Constrict_M", "oar", "D_mean", aim=("<=", 40.0, "gy")),
        _row("Musc_Constrict_I", "oar", "D_mean", aim=("<=", 40.0, "gy")),
        _row("Cricopharyngeus", "oar", "D_mean", aim=("<=", 40.0, "gy")),
        _row("Larynx_SG", "oar", "D_mean", aim=("<=", 40.0, "gy")),
        _row("Glottic_Area", "oar", "D_mean", aim=("<=", 40.0, "gy")),
        _row("Bone_Mandible", "oar", "D_pct", 2.0, aim=("<=", 70.0, "gy")),
        _row("Bone_Mandible-PTV", "oar", "D_pct", 2.0, aim=("<=", 50.0, "gy")),
        _row("Eye_(L/R)", "oar", "D_cc", 0.03, aim=("<=", 35.0, "gy")),
        _row("Lens_(L/R)", "oar", "D_cc", 0.03, aim=("<=", 6.0, "gy")),
        _row("Pituitary", "oar", "D_mean", aim=("<=", 20.0, "gy")),
        _row("OpticNrv_(L/R)", "oar", "D_cc", 0.03, aim=("<=", 55.0, "gy")),
    ]
    doc = {
        "prescriptions": {"PTV_54.25": 54.25, "PTV_70": 70.0},
        "lambda": {"mae": 1.0, "cdm": 0.5},
        "specs": rows,
    }
    return parse_template(json.dumps(doc))
