"""Boundary fidelity: every bound operation agrees with the core engine."""

import json

import numpy as np
import pytest

import dosemetrics_bindings as b
from dosemetrics.bitmask import BitMaskVolume, encode
from dosemetrics.loss import LossConfig, total_loss
from dosemetrics.metrics import evaluate_metric
from dosemetrics.template import TemplateError, parse_template
from dosemetrics.volumes import DoseGrid, RoiMask

REL = 1e-9


def random_case(rng, dims=(12, 12, 12), n_rois=3):
    nx, ny, nz = dims
    pred = rng.uniform(0, 80, size=(nz, ny, nx)).astype(np.float32)
    gt = rng.uniform(0, 80, size=(nz, ny, nx)).astype(np.float32)
    names = [f"R{i}" for i in range(1, n_rois + 1)]
    masks = []
    for name in names:
        occ = rng.random((nz, ny, nx)) < 0.35
        occ[0, 0, 0] = True
        masks.append(RoiMask(name, dims, occ))
    packed = encode(masks, spacing_mm=(2, 2, 2))
    rows = [
        {"roi": names[0], "class": "ptv",
         "metric": {"kind": "V_pct", "param": 95.0},
         "constraint": {"op": ">=", "value": 98.0, "unit": "pct_volume"},
         "loss_weight": 1.0},
        {"roi": names[0], "class": "ptv", "metric": {"kind": "D_mean"},
         "aim": {"op": "<=", "value": 102.0, "unit": "pct_presc"},
         "loss_weight": 1.0},
    ]
    for name in names[1:]:
        rows.append({"roi": name, "class": "oar",
                     "metric": {"kind": "D_cc", "param": 0.03},
                     "aim": {"op": "<=", "value": 50.0, "unit": "gy"},
                     "loss_weight": 0.1})
    template_json = json.dumps({
        "prescriptions": {names[0]: 70.0},
        "lambda": {"mae": 1.0, "cdm": 0.5},
        "specs": rows,
    })
    return pred, gt, packed, template_json


def rel_err(a, c):
    return abs(a - c) / max(abs(c), 1e-300) if c != 0 else abs(a)


def test_boundary_fidelity_100_random_cases():
    rng = np.random.default_rng(9)
    options = {"alpha_by_roi": None, "margin": 0.5, "eps": 0.05}
    worst = 0.0
    for case_index in range(100):
        pred, gt, packed, template_json = random_case(rng)
        template = parse_template(template_json)
        words = packed.words.copy()
        grad_out = np.zeros(pred.shape, dtype=np.float64)
        lt, lc, lm = b.bound_total_loss(
            pred, gt, words, packed.roi_table, template_json,
            options={"margin": 0.5, "eps": 0.05},
            grad_out=grad_out, spacing_mm=(2, 2, 2))

        pred_grid = DoseGrid((12, 12, 12), (2, 2, 2), pred)
        gt_grid = DoseGrid((12, 12, 12), (2, 2, 2), gt)
        cfg = LossConfig.for_template(template, cohort=[(gt_grid, packed)],
                                      margin_m=0.5, tolerance_eps=0.05)
        core = total_loss(pred_grid, gt_grid, packed, cfg, with_grad=True)
        for bound_v, core_v in ((lt, core.l_total), (lc, core.l_cdm), (lm, core.l_mae)):
            worst = max(worst, rel_err(bound_v, core_v))
        denom = np.maximum(np.abs(core.gradient), 1e-300)
        nonzero = core.gradient != 0
        if nonzero.any():
            worst = max(worst, float(
                (np.abs(grad_out - core.gradient)[nonzero] / denom[nonzero]).max()))
        assert not grad_out[~nonzero].any()

        bound_rows = b.bound_metrics(pred, words, packed.roi_table, template_json,
                                     spacing_mm=(2, 2, 2))
        core_rows = [
            evaluate_metric(pred_grid, (packed, spec.roi), spec, template.prescriptions)
            for spec in template.specs
        ]
        for row, mv in zip(bound_rows, core_rows):
            worst = max(worst, rel_err(row["value"], mv.value))

    assert worst <= REL, f"worst boundary relative error {worst}"
    print(f"[PASS] boundary fidelity: 100 cases, worst rel error {worst:.2e} (<= 1e-9)")


def test_codec_roundtrip_across_boundary():
    rng = np.random.default_rng(4)
    for n in (3, 30):
        masks = rng.random((n, 6, 5, 4)) < 0.4
        names = [f"R{i:02d}" for i in range(n)]
        words, table = b.bound_encode(masks, names)
        assert words.dtype == np.uint32
        for i, name in enumerate(names):
            back = b.bound_decode(words, table, name)
            assert np.array_equal(back, masks[i])
        out = np.zeros((6, 5, 4), dtype=bool)
        returned = b.bound_decode(words, table, names[0], out=out)
        assert returned is out
        assert np.array_equal(out, masks[0])
    print("[PASS] codec roundtrip across the boundary: 3-mask and 30-mask identity")


def test_core_equivalence_of_codec():
    rng = np.random.default_rng(5)
    masks = rng.random((5, 4, 4, 4)) < 0.5
    names = list("abcde")
    words, table = b.bound_encode(masks, names)
    core = encode([RoiMask(n, (4, 4, 4), masks[i]) for i, n in enumerate(names)])
    assert np.array_equal(words, core.words)
    assert table == core.roi_table


def test_error_paths_carry_core_messages():
    rng = np.random.default_rng(6)
    pred, gt, packed, template_json = random_case(rng)
    words = packed.words.copy()

    with pytest.raises(ValueError, match="33 masks"):
        b.bound_encode(np.zeros((33, 2, 2, 2), dtype=bool),
                       [f"R{i}" for i in range(33)])

    with pytest.raises(ValueError, match="float32"):
        b.bound_total_loss(pred.astype(np.float64), gt, words, packed.roi_table,
                           template_json)

    bad_gt = gt[:, :, :8].copy()
    with pytest.raises(ValueError, match=r"do(es)? not match|mismatch"):
        b.bound_total_loss(pred, bad_gt, words, packed.roi_table, template_json)

    with pytest.raises(TemplateError, match="not valid JSON"):
        b.bound_total_loss(pred, gt, words, packed.roi_table, "{broken")

    with pytest.raises(KeyError, match="unknown ROI"):
        b.bound_decode(words, packed.roi_table, "Nope")

    with pytest.raises(ValueError, match="grad_out shape"):
        b.bound_total_loss(pred, gt, words, packed.roi_table, template_json,
                           grad_out=np.zeros((2, 2, 2)))
    print("[PASS] error paths surface as host exceptions with core messages")


def test_no_hidden_state_identical_calls():
    rng = np.random.default_rng(7)
    pred, gt, packed, template_json = random_case(rng)
    words = packed.words.copy()
    options = {"margin": 0.5, "eps": 0.05}
    first = b.bound_total_loss(pred, gt, words, packed.roi_table, template_json,
                               options=options)
    second = b.bound_total_loss(pred, gt, words, packed.roi_table, template_json,
                                options=options)
    assert first == second


def test_identical_volumes_zero_across_boundary():
    rng = np.random.default_rng(8)
    pred, gt, packed, template_json = random_case(rng)
    words = packed.words.copy()
    grad = np.ones(pred.shape)
    lt, lc, lm = b.bound_total_loss(pred, pred, words, packed.roi_table,
                                    template_json, options={"eps": 0.05},
                                    grad_out=grad)
    assert (lt, lc, lm) == (0.0, 0.0, 0.0)
    assert not grad.any()


def test_caller_buffers_stay_writable():
    rng = np.random.default_rng(10)
    pred, gt, packed, template_json = random_case(rng)
    words = packed.words.copy()
    b.bound_total_loss(pred, gt, words, packed.roi_table, template_json,
                       options={"eps": 0.05})
    pred[0, 0, 0] = 1.0  # the boundary must not freeze caller memory
    words[0, 0, 0] = words[0, 0, 0]


def test_empty_roi_reported_as_skipped():
    dims = (4, 4, 4)
    occ = np.ones(dims, dtype=bool)
    empty = np.zeros(dims, dtype=bool)
    packed = encode([RoiMask("A", dims, occ), RoiMask("B", dims, empty)])
    template_json = json.dumps({
        "prescriptions": {},
        "specs": [
            {"roi": "A", "class": "oar", "metric": {"kind": "D_mean"},
             "aim": {"op": "<=", "value": 50.0, "unit": "gy"}},
            {"roi": "B", "class": "oar", "metric": {"kind": "D_mean"},
             "aim": {"op": "<=", "value": 50.0, "unit": "gy"}},
        ],
    })
    dose = np.full(dims, 10.0, dtype=np.float32)
    rows = b.bound_metrics(dose, np.ascontiguousarray(packed.words),
                           packed.roi_table, template_json)
    by_roi = {r["roi"]: r for r in rows}
    assert by_roi["A"]["skipped"] is False
    assert by_roi["A"]["value"] == pytest.approx(10.0)
    assert by_roi["B"]["skipped"] is True
    assert by_roi["B"]["value"] is None


def test_version_introspection():
    assert b.__version__
    assert b.core_version()
