"""Command-line entry point: every engine capability for batch use.

Outputs are deterministic given inputs and seed. JSON goes to stdout with
--json, diagnostics to stderr, and no output file is written unless the
whole computation succeeded. Exit codes: 0 success, 1 validation error,
2 when --strict is set and a constraint check failed.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

from . import bench as bench_mod
from .bitmask import VoxelPermutation, encode
from .loss import LossConfig, finite_difference_check, total_loss
from .metrics import evaluate_metric
from .optimizer import (
    REFERENCE_PHANTOM,
    OptimizerConfig,
    derive_loss_config,
    make_initial_dose,
    make_phantom,
    optimize_dose,
)
from .scoring import (
    cohort_summary,
    constraint_report,
    score_pair,
    to_reporting_unit,
)
from .surrogate import error_bound, select_alpha_from_cohort
from .template import PlanTemplate, default_paper_template, parse_template
from .volumes import load_volume, save_volume

TEMPLATE_ENV_VAR = "DOSEMETRICS_TEMPLATE"


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on bad usage, not argparse's default 2
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(1)


def _load_template(path: str | None) -> PlanTemplate:
    if path is None:
        path = os.environ.get(TEMPLATE_ENV_VAR)
    if path is None:
        return default_paper_template()
    return parse_template(Path(path).read_text())


def _spec_obj(spec) -> dict:
    return {"roi": spec.roi, "class": spec.roi_class, "metric": spec.metric.label()}


def _emit(payload: dict, args) -> None:
    if getattr(args, "json", False):
        print(json.dumps(payload, indent=2))
    else:
        for line in _summarize(payload):
            print(line)


def _summarize(payload: dict, prefix: str = "") -> list[str]:
    lines = []
    for key, value in payload.items():
        if isinstance(value, dict):
            lines.append(f"{prefix}{key}:")
            lines.extend(_summarize(value, prefix + "  "))
        elif isinstance(value, list):
            lines.append(f"{prefix}{key}: [{len(value)} entries]")
        else:
            lines.append(f"{prefix}{key}: {value}")
    return lines


def _parse_alpha_overrides(entries: list[str] | None) -> dict[str, float] | None:
    if not entries:
        return None
    out = {}
    for entry in entries:
        roi, _, value = entry.partition("=")
        if not value:
            raise ValueError(f"--alpha expects ROI=VALUE, got {entry!r}")
        out[roi] = float(value)
    return out


def _loss_config(template: PlanTemplate, args, gt=None, rois=None) -> LossConfig:
    alpha_by_roi = _parse_alpha_overrides(getattr(args, "alpha", None))
    cohort = None
    if getattr(args, "alpha_from_gt", False) and gt is not None and rois is not None:
        cohort = [(gt, rois)]
    return LossConfig.for_template(
        template,
        alpha_by_roi=alpha_by_roi,
        cohort=cohort,
        margin_m=getattr(args, "margin", 0.5),
        tolerance_eps=getattr(args, "eps", 0.01),
        lambda_mae=getattr(args, "lambda_mae", None),
        lambda_cdm=getattr(args, "lambda_cdm", None),
        use_surrogate_for_gt=not getattr(args, "exact_gt", False),
    )


def _metric_rows(report) -> list[dict]:
    return [
        {
            **_spec_obj(c.spec),
            "unit": c.unit,
            "pred": c.pred_value,
            "gt": c.gt_value,
            "abs_delta": c.abs_delta,
            "aim_pass": c.pred_aim_pass,
            "constraint_pass": c.pred_constraint_pass,
        }
        for c in report.per_metric
    ]


def _score_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["patient_id", "roi", "class", "metric", "unit",
                     "pred", "gt", "abs_delta", "aim_pass", "constraint_pass"])
    for report in reports:
        for c in report.per_metric:
            writer.writerow([
                report.patient_id, c.spec.roi, c.spec.roi_class, c.spec.metric.label(),
                c.unit, repr(c.pred_value), repr(c.gt_value), repr(c.abs_delta),
                c.pred_aim_pass, c.pred_constraint_pass,
            ])
    return buf.getvalue()


def cmd_eval(args) -> int:
    template = _load_template(args.template)
    dose = load_volume(args.dose, "dose")
    rois = load_volume(args.rois, "bitmask")
    rows = []
    for roi in template.roi_order:
        for spec in template.specs_for_roi(roi):
            mv = evaluate_metric(dose, (rois, roi), spec, template.prescriptions)
            rows.append({
                **_spec_obj(spec),
                "value": mv.value,
                "reporting_value": to_reporting_unit(spec, mv, template.prescriptions),
                "roi_voxel_count": mv.roi_voxel_count,
                "clamped": mv.clamped,
            })
    payload = {"metrics": rows}
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=2) + "\n")
    _emit(payload, args)
    return 0


def cmd_score(args) -> int:
    template = _load_template(args.template)
    cases = []
    if args.case:
        cases = [(p, g, pid) for p, g, pid in args.case]
    if args.pred and args.gt:
        cases.append((args.pred, args.gt, args.patient_id))
    if not cases:
        raise ValueError("score needs --pred/--gt or at least one --case")
    rois = load_volume(args.rois, "bitmask")

    reports = []
    for pred_path, gt_path, pid in sorted(cases, key=lambda c: c[2]):
        pred = load_volume(pred_path, "dose")
        gt = load_volume(gt_path, "dose")
        reports.append(score_pair(pred, gt, rois, template, patient_id=pid))

    summary = cohort_summary(reports)
    payload = {
        "cases": [
            {
                "patient_id": r.patient_id,
                "ptv_score_pct": r.ptv_score,
                "oar_score_gy": r.oar_score,
                "dose_score_gy": r.dose_score,
                "per_metric": _metric_rows(r),
                "skipped_rois": list(r.skipped_rois),
            }
            for r in reports
        ],
        "cohort": {
            "n_cases": summary.n_cases,
            "ptv_score": {"mean": summary.ptv_score_mean, "sd": summary.ptv_score_sd},
            "oar_score": {"mean": summary.oar_score_mean, "sd": summary.oar_score_sd},
            "dose_score": {"mean": summary.dose_score_mean, "sd": summary.dose_score_sd},
            "sd_defined": summary.sd_defined,
            "aim_pass_rate": summary.aim_pass_rate,
            "constraint_pass_rate": summary.constraint_pass_rate,
        },
    }
    if args.out_json:
        Path(args.out_json).write_text(json.dumps(payload, indent=2) + "\n")
    if args.out_csv:
        Path(args.out_csv).write_text(_score_csv(reports))
    _emit(payload, args)
    if args.strict:
        failed = any(
            c.pred_constraint_pass is False for r in reports for c in r.per_metric
        )
        if failed:
            print("strict mode: at least one constraint failed", file=sys.stderr)
            return 2
    return 0


def cmd_loss(args) -> int:
    template = _load_template(args.template)
    pred = load_volume(args.pred, "dose")
    gt = load_volume(args.gt, "dose")
    rois = load_volume(args.rois, "bitmask")
    cfg = _loss_config(template, args, gt, rois)
    result = total_loss(pred, gt, rois, cfg, with_grad=False)
    payload = {
        "l_total": result.l_total,
        "l_cdm": result.l_cdm,
        "l_mae": result.l_mae,
        "lambda_mae": cfg.lambda_mae,
        "lambda_cdm": cfg.lambda_cdm,
        "per_metric": [
            {**_spec_obj(t.spec), "pred": t.m_pred, "gt": t.m_gt,
             "weighted_delta": t.weighted_delta}
            for t in result.per_metric
        ],
        "skipped_rois": list(result.skipped_rois),
    }
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=2) + "\n")
    _emit(payload, args)
    return 0


def cmd_gradcheck(args) -> int:
    template = _load_template(args.template)
    pred = load_volume(args.pred, "dose")
    gt = load_volume(args.gt, "dose")
    rois = load_volume(args.rois, "bitmask")
    cfg = _loss_config(template, args, gt, rois)
    report = finite_difference_check(
        pred, gt, rois, cfg, probe_count=args.probes, step_h=args.step, seed=args.seed
    )
    payload = {
        "max_rel_error": report.max_rel_error,
        "mean_rel_error": report.mean_rel_error,
        "n_smooth": report.n_smooth,
        "n_kink": report.n_kink,
        "n_saturated": report.n_saturated,
        "n_boundary": report.n_boundary,
    }
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=2) + "\n")
    _emit(payload, args)
    return 0


def cmd_alpha(args) -> int:
    cohort = []
    rois = load_volume(args.rois, "bitmask") if args.rois else None
    for dose_path in args.doses:
        grid = load_volume(dose_path, "dose")
        source = (rois, args.roi) if rois is not None else None
        cohort.append((grid, source))
    cfg = select_alpha_from_cohort(
        cohort, threshold_gy=args.threshold, margin_m=args.margin, eps=args.eps,
        roi_label=args.roi,
    )
    payload = {
        "roi": cfg.roi,
        "threshold_gy": cfg.threshold,
        "margin_gy": cfg.margin_m,
        "eps": cfg.tolerance_eps,
        "q_m": cfg.q_m,
        "alpha_min": cfg.alpha,
        "bound_at_alpha": error_bound(cfg.alpha, cfg.q_m, cfg.margin_m),
    }
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=2) + "\n")
    _emit(payload, args)
    return 0


def cmd_encode(args) -> int:
    masks = []
    for path in args.mask:
        volume = load_volume(path, "bitmask")
        masks.extend(volume.decode_all())
    packed = encode(masks, spacing_mm=load_volume(args.mask[0], "bitmask").spacing_mm)
    save_volume(packed, args.out)
    _emit({"rois": list(packed.roi_table), "out": str(args.out)}, args)
    return 0


def cmd_decode(args) -> int:
    rois = load_volume(args.rois, "bitmask")
    roi = args.name if args.name is not None else args.index
    if roi is None:
        raise ValueError("decode needs --name or --index")
    mask = rois.decode(roi)
    single = encode([mask], spacing_mm=rois.spacing_mm)
    save_volume(single, args.out)
    _emit({"roi": mask.name, "voxels": mask.voxel_count, "out": str(args.out)}, args)
    return 0


_PRESETS = {"reference": REFERENCE_PHANTOM}

_TRANSFORMS = {
    "flip-x": lambda: VoxelPermutation.flip("x"),
    "flip-y": lambda: VoxelPermutation.flip("y"),
    "flip-z": lambda: VoxelPermutation.flip("z"),
    "rot90-z": lambda: VoxelPermutation.rotate("z"),
    "translate": lambda: VoxelPermutation.translate(3, -2, 1),
}


def cmd_bench(args) -> int:
    dims = tuple(args.dims)
    transform = _TRANSFORMS[args.transform]()
    payload: dict = {}
    if args.curve:
        curve = bench_mod.speedup_curve(dims, repetitions=args.reps, transform=transform)
        payload["speedup_curve"] = [{"roi_count": n, "speedup": s} for n, s in curve]
        payload["monotone"] = bench_mod.is_monotone_speedup(curve)
    comparison = bench_mod.bench_transform(dims, args.rois, transform, repetitions=args.reps)
    memory = bench_mod.bench_memory(dims, args.rois)
    payload["transform"] = {
        "one_hot": asdict(comparison.one_hot),
        "packed": asdict(comparison.packed),
        "speedup": comparison.speedup,
    }
    payload["memory"] = asdict(memory)
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=2) + "\n")
    _emit(payload, args)
    return 0


def _trace_csv(result) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    labels = sorted({label for row in result.trace for label in row.metrics})
    writer.writerow(["iteration", "l_total", "l_cdm", "l_mae", "step_size", *labels])
    for row in result.trace:
        writer.writerow([
            row.iteration, repr(row.l_total), repr(row.l_cdm), repr(row.l_mae),
            repr(row.step_size), *[repr(row.metrics.get(l, "")) for l in labels],
        ])
    return buf.getvalue()


def cmd_phantom(args) -> int:
    gt, rois, template = make_phantom(_PRESETS[args.preset], seed=args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_volume(gt, out / "gt")
    save_volume(rois, out / "rois")
    (out / "template.json").write_text(template.to_json_text() + "\n")
    _emit({"out_dir": str(out), "rois": list(rois.roi_table),
           "dims": list(gt.dims)}, args)
    return 0


def cmd_optimize(args) -> int:
    if args.gt:
        gt = load_volume(args.gt, "dose")
        rois = load_volume(args.rois, "bitmask")
        template = _load_template(args.template)
    else:
        gt, rois, template = make_phantom(_PRESETS[args.preset], seed=args.seed)

    cfg = OptimizerConfig(
        step_size=args.step, max_iterations=args.iters, tolerance=args.tol,
        init_rule=args.init, blur_width=args.blur_width, blur_mix=args.blur_mix,
        deflate=args.deflate, uniform_gy=args.uniform_gy,
    )
    if args.alpha:
        loss_cfg = LossConfig.for_template(
            template,
            alpha_by_roi=_parse_alpha_overrides(args.alpha),
            lambda_mae=args.lambda_mae,
            lambda_cdm=args.lambda_cdm,
        )
    else:
        loss_cfg = derive_loss_config(template, gt, rois, cfg,
                                      lambda_mae=args.lambda_mae,
                                      lambda_cdm=args.lambda_cdm)
    init = make_initial_dose(gt, args.init, blur_width=args.blur_width,
                             blur_mix=args.blur_mix, deflate=args.deflate,
                             uniform_gy=args.uniform_gy)
    result = optimize_dose(init, gt, rois, template, cfg, loss_cfg)
    rows = constraint_report(result.final, rois, template)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_volume(result.final, out / "final")
    (out / "trace.csv").write_text(_trace_csv(result))
    payload = {
        "status": result.status,
        "iterations": result.iterations,
        "l_total_final": result.trace[-1].l_total,
        "constraints": [
            {**_spec_obj(r.spec), "value": r.value, "unit": r.unit,
             "aim_pass": r.aim_pass, "constraint_pass": r.constraint_pass}
            for r in rows
        ],
        "out_dir": str(out),
    }
    if result.diagnostic:
        payload["diagnostic"] = result.diagnostic
    (out / "result.json").write_text(json.dumps(payload, indent=2) + "\n")
    _emit(payload, args)
    if args.strict and any(r.constraint_pass is False for r in rows):
        print("strict mode: at least one constraint failed", file=sys.stderr)
        return 2
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="dosemetrics",
                     description="dose-metric engine: evaluate, score, optimize")
    parser.add_argument("--json", action="store_true", help="emit JSON on stdout")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(fn=fn)
        return p

    p = add("eval", cmd_eval, "evaluate every template metric exactly")
    p.add_argument("--dose", required=True)
    p.add_argument("--rois", required=True)
    p.add_argument("--template")
    p.add_argument("--out")

    p = add("score", cmd_score, "score predicted vs reference dose")
    p.add_argument("--pred")
    p.add_argument("--gt")
    p.add_argument("--patient-id", default="case")
    p.add_argument("--case", nargs=3, action="append",
                   metavar=("PRED", "GT", "ID"), default=[])
    p.add_argument("--rois", required=True)
    p.add_argument("--template")
    p.add_argument("--out-json")
    p.add_argument("--out-csv")
    p.add_argument("--strict", action="store_true",
                   help="exit 2 if any constraint fails")

    for name, fn, help_text in (
        ("loss", cmd_loss, "combined loss components"),
        ("gradcheck", cmd_gradcheck, "finite-difference gradient verification"),
    ):
        p = add(name, fn, help_text)
        p.add_argument("--pred", required=True)
        p.add_argument("--gt", required=True)
        p.add_argument("--rois", required=True)
        p.add_argument("--template")
        p.add_argument("--alpha", action="append", metavar="ROI=VALUE")
        p.add_argument("--alpha-from-gt", action="store_true",
                       help="derive sigmoid slopes from the reference dose")
        p.add_argument("--margin", type=float, default=0.5)
        p.add_argument("--eps", type=float, default=0.01)
        p.add_argument("--lambda-mae", type=float, default=None)
        p.add_argument("--lambda-cdm", type=float, default=None)
        p.add_argument("--exact-gt", action="store_true",
                       help="use exact V-metrics on the reference side")
        p.add_argument("--out")
        if name == "gradcheck":
            p.add_argument("--probes", type=int, default=64)
            p.add_argument("--step", type=float, default=1e-4)
            p.add_argument("--seed", type=int, default=0)

    p = add("alpha", cmd_alpha, "derive the sigmoid slope from dose volumes")
    p.add_argument("--doses", action="append", required=True)
    p.add_argument("--rois", help="packed masks; omit to pool the whole volume")
    p.add_argument("--roi", help="ROI to pool when --rois is given; label otherwise")
    p.add_argument("--threshold", type=float, required=True)
    p.add_argument("--margin", type=float, default=0.5)
    p.add_argument("--eps", type=float, default=0.01)
    p.add_argument("--out")

    p = add("encode", cmd_encode, "merge mask containers into one packed volume")
    p.add_argument("--mask", action="append", required=True)
    p.add_argument("--out", required=True)

    p = add("decode", cmd_decode, "extract one ROI from a packed volume")
    p.add_argument("--rois", required=True)
    p.add_argument("--name")
    p.add_argument("--index", type=int)
    p.add_argument("--out", required=True)

    p = add("bench", cmd_bench, "one-hot vs packed efficiency comparison")
    p.add_argument("--dims", type=int, nargs=3, default=[96, 96, 96])
    p.add_argument("--rois", type=int, default=30)
    p.add_argument("--transform", choices=sorted(_TRANSFORMS), default="flip-x")
    p.add_argument("--reps", type=int, default=11)
    p.add_argument("--curve", action="store_true")
    p.add_argument("--out")

    p = add("phantom", cmd_phantom, "generate a synthetic phantom case")
    p.add_argument("--preset", choices=sorted(_PRESETS), default="reference")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)

    p = add("optimize", cmd_optimize, "gradient descent on a dose volume")
    p.add_argument("--preset", choices=sorted(_PRESETS), default="reference",
                   help="phantom preset when --gt is not given")
    p.add_argument("--gt")
    p.add_argument("--rois")
    p.add_argument("--template")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init", choices=("blur", "uniform", "zero"), default="blur")
    p.add_argument("--blur-width", type=int, default=5)
    p.add_argument("--blur-mix", type=float, default=0.2)
    p.add_argument("--deflate", type=float, default=0.90)
    p.add_argument("--uniform-gy", type=float, default=40.0)
    p.add_argument("--step", type=float, default=4000.0)
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--tol", type=float, default=0.0)
    p.add_argument("--alpha", action="append", metavar="ROI=VALUE")
    p.add_argument("--lambda-mae", type=float, default=None)
    p.add_argument("--lambda-cdm", type=float, default=None)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--strict", action="store_true")

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except BrokenPipeError:
        return 1
    except Exception as exc:  # every module error surfaces with its message
        message = exc.args[0] if exc.args else str(exc)
        print(f"error: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
