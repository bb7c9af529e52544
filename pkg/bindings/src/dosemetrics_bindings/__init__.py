"""Buffer-level access to the dose-metric engine for training loops.

Four operations, all stateless and reentrant, operating on caller-provided
contiguous numpy buffers: ``bound_total_loss`` (forward value plus gradient
written into a caller-allocated buffer), ``bound_metrics``, ``bound_encode``,
and ``bound_decode``. Dose buffers are float32, packed masks uint32, and the
template travels as JSON text, so a framework can wrap the loss as a custom
differentiable operation without copies beyond the float64 promotion the
core's precision contract requires.
"""

from __future__ import annotations

import numpy as np

import dosemetrics
from dosemetrics.bitmask import BitMaskVolume, encode as _encode
from dosemetrics.loss import LossConfig, total_loss
from dosemetrics.metrics import evaluate_metric
from dosemetrics.optimizer import derive_loss_config
from dosemetrics.template import parse_template
from dosemetrics.volumes import DoseGrid, RoiMask

__all__ = [
    "bound_total_loss",
    "bound_metrics",
    "bound_encode",
    "bound_decode",
    "core_version",
    "__version__",
]

__version__ = "0.1.0"


def core_version() -> str:
    return dosemetrics.__version__


def _require(buf, dtype, name: str) -> np.ndarray:
    arr = np.asarray(buf)
    if arr.dtype != np.dtype(dtype):
        raise ValueError(f"{name} buffer must be {np.dtype(dtype).name}, got {arr.dtype.name}")
    if arr.ndim != 3:
        raise ValueError(f"{name} buffer must be 3D (nz, ny, nx), got shape {arr.shape}")
    if not arr.flags.c_contiguous:
        raise ValueError(f"{name} buffer must be C-contiguous")
    return arr


def _dims_of(arr: np.ndarray) -> tuple[int, int, int]:
    nz, ny, nx = arr.shape
    return (nx, ny, nz)


def _dose_grid(buf, name: str, spacing_mm, unit_scale: float) -> DoseGrid:
    arr = _require(buf, np.float32, name)
    return DoseGrid(dims=_dims_of(arr), spacing_mm=tuple(spacing_mm),
                    values=arr, unit_scale=unit_scale)


def _mask_volume(buf, roi_table, spacing_mm) -> BitMaskVolume:
    arr = _require(buf, np.uint32, "bitmask")
    return BitMaskVolume(dims=_dims_of(arr), spacing_mm=tuple(spacing_mm),
                         words=arr, roi_table=dict(roi_table))


def _loss_config(template_text: str, gt: DoseGrid, rois: BitMaskVolume,
                 options: dict | None) -> LossConfig:
    options = dict(options or {})
    template = template_text
    if isinstance(template, str):
        template = parse_template(template)
    kwargs = {}
    for key in ("lambda_mae", "lambda_cdm"):
        if key in options:
            kwargs[key] = float(options[key])
    if options.get("derive_from_gt", False):
        cfg = derive_loss_config(template, gt, rois, **kwargs)
    else:
        cfg = LossConfig.for_template(
            template,
            alpha_by_roi=options.get("alpha_by_roi"),
            cohort=None if options.get("alpha_by_roi") else [(gt, rois)],
            margin_m=float(options.get("margin", 0.5)),
            tolerance_eps=float(options.get("eps", 0.01)),
            use_surrogate_for_gt=not options.get("exact_gt", False),
            empty_roi_policy=options.get("empty_roi_policy", "skip"),
            **kwargs,
        )
    return cfg


def bound_total_loss(
    pred,
    gt,
    bitmask,
    roi_table: dict[str, int],
    template_json: str,
    options: dict | None = None,
    grad_out=None,
    spacing_mm=(2.0, 2.0, 2.0),
    unit_scale: float = 1.0,
) -> tuple[float, float, float]:
    """Combined loss on raw buffers; gradient written into ``grad_out``.

    ``pred``/``gt`` are float32 (nz, ny, nx) buffers, ``bitmask`` uint32 of
    the same shape, and ``grad_out`` (optional) a caller-allocated float
    buffer of matching shape that receives d l_total / d pred. Returns
    (l_total, l_cdm, l_mae).
    """
    pred_grid = _dose_grid(pred, "pred", spacing_mm, unit_scale)
    gt_grid = _dose_grid(gt, "gt", spacing_mm, unit_scale)
    rois = _mask_volume(bitmask, roi_table, spacing_mm)
    if grad_out is not None:
        out = np.asarray(grad_out)
        if out.shape != pred_grid.values.shape:
            raise ValueError(
                f"grad_out shape {out.shape} does not match pred shape "
                f"{pred_grid.values.shape}"
            )
        if not out.flags.writeable:
            raise ValueError("grad_out buffer is not writable")
    cfg = _loss_config(template_json, gt_grid, rois, options)
    result = total_loss(pred_grid, gt_grid, rois, cfg, with_grad=grad_out is not None)
    if grad_out is not None:
        np.copyto(np.asarray(grad_out), result.gradient, casting="same_kind")
    return result.l_total, result.l_cdm, result.l_mae


def bound_metrics(
    dose,
    bitmask,
    roi_table: dict[str, int],
    template_json: str,
    spacing_mm=(2.0, 2.0, 2.0),
    unit_scale: float = 1.0,
) -> list[dict]:
    """Exact per-spec metric values on raw buffers.

    Empty ROIs are reported with ``skipped: True`` rather than raising, so a
    training loop can keep going when a mask vanishes at coarse resolution.
    """
    grid = _dose_grid(dose, "dose", spacing_mm, unit_scale)
    rois = _mask_volume(bitmask, roi_table, spacing_mm)
    template = parse_template(template_json)
    rows = []
    for roi in template.roi_order:
        empty = rois.roi_voxel_count(roi) == 0
        for spec in template.specs_for_roi(roi):
            row = {
                "roi": spec.roi,
                "kind": spec.metric.kind,
                "param": spec.metric.param,
                "skipped": empty,
                "value": None,
                "roi_voxel_count": 0,
                "clamped": False,
            }
            if not empty:
                mv = evaluate_metric(grid, (rois, roi), spec, template.prescriptions)
                row.update(value=mv.value, roi_voxel_count=mv.roi_voxel_count,
                           clamped=mv.clamped)
            rows.append(row)
    return rows


def bound_encode(masks, names) -> tuple[np.ndarray, dict[str, int]]:
    """Pack boolean mask buffers (n_roi, nz, ny, nx) into one uint32 buffer."""
    arr = np.asarray(masks)
    if arr.ndim != 4:
        raise ValueError(f"masks buffer must be 4D (n_roi, nz, ny, nx), got {arr.shape}")
    names = list(names)
    if len(names) != arr.shape[0]:
        raise ValueError(f"{len(names)} names for {arr.shape[0]} mask channels")
    nz, ny, nx = arr.shape[1:]
    dims = (nx, ny, nz)
    volume = _encode([RoiMask(name, dims, arr[i].astype(bool))
                      for i, name in enumerate(names)])
    return np.ascontiguousarray(volume.words), dict(volume.roi_table)


def bound_decode(bitmask, roi_table: dict[str, int], roi, out=None) -> np.ndarray:
    """Extract one ROI as a boolean buffer; writes into ``out`` when given."""
    volume = _mask_volume(bitmask, roi_table, (1.0, 1.0, 1.0))
    occupancy = volume.decode(roi).occupancy
    if out is None:
        return occupancy.copy()
    target = np.asarray(out)
    if target.shape != occupancy.shape:
        raise ValueError(
            f"out shape {target.shape} does not match mask shape {occupancy.shape}")
    np.copyto(target, occupancy, casting="same_kind")
    return target
