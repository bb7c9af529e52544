"""Desk-scale efficiency comparison: one-hot ROI channels vs packed bit-mask.

Times the two mechanisms the packed representation is credited with:
transforming all ROIs at once instead of per channel, and decoding masks
on demand during loss evaluation instead of keeping every channel alive.
Correctness precedes speed: every timed pair is checked for output
equality first, and a mismatch aborts the benchmark.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np

from .bitmask import MaskAccounting, VoxelPermutation, encode
from .loss import LossConfig, cdm_loss
from .template import parse_template
from .volumes import DoseGrid, RoiMask

__all__ = [
    "BenchError",
    "BenchReport",
    "TransformComparison",
    "MemoryComparison",
    "random_masks",
    "bench_transform",
    "bench_memory",
    "speedup_curve",
]

# measured medians can jitter a little; real speedup steps are >= 2x
MONOTONE_NOISE_FACTOR = 0.9


class BenchError(RuntimeError):
    """Raised when the correctness check preceding a timing fails."""


@dataclass(frozen=True)
class BenchReport:
    scenario: str
    roi_count: int
    dims: tuple[int, int, int]
    median_ns: float
    min_ns: float
    max_ns: float
    repetitions: int
    bytes_moved: int
    peak_mask_bytes: int


@dataclass(frozen=True)
class TransformComparison:
    one_hot: BenchReport
    packed: BenchReport

    @property
    def speedup(self) -> float:
        return self.one_hot.median_ns / self.packed.median_ns


@dataclass(frozen=True)
class MemoryComparison:
    one_hot_bytes: int
    packed_bytes: int
    storage_ratio: float
    peak_decoded_masks: int
    peak_decoded_mask_bytes: int


def random_masks(dims: tuple[int, int, int], roi_count: int, seed: int = 0,
                 density: float = 0.2) -> list[RoiMask]:
    rng = np.random.default_rng(seed)
    nx, ny, nz = dims
    return [
        RoiMask(name=f"R{i:02d}", dims=dims,
                occupancy=rng.random((nz, ny, nx)) < density)
        for i in range(1, roi_count + 1)
    ]


def _median_timing(fn, repetitions: int, warmup: int = 2) -> tuple[float, float, float]:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repetitions):
        t0 = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - t0)
    arr = np.asarray(samples, dtype=np.float64)
    return float(np.median(arr)), float(arr.min()), float(arr.max())


def bench_transform(
    dims: tuple[int, int, int],
    roi_count: int,
    transform: VoxelPermutation | None = None,
    repetitions: int = 11,
    seed: int = 0,
) -> TransformComparison:
    """Time one packed transform against per-channel transforms.

    The per-channel path applies the transform to each boolean mask; the
    packed path applies it once to the uint32 words. Outputs are verified
    equal (decode after transform vs transform per mask) before timing.
    """
    if repetitions < 5:
        raise ValueError("need at least 5 repetitions")
    transform = transform or VoxelPermutation.flip("x")
    masks = random_masks(dims, roi_count, seed=seed)
    packed = encode(masks)

    transformed_packed = transform.apply(packed)
    for mask in masks:
        expected = transform.apply_to_mask(mask)
        actual = transformed_packed.decode(mask.name)
        if not np.array_equal(expected.occupancy, actual.occupancy):
            raise BenchError(
                f"transform mismatch for ROI {mask.name!r}: packed path disagrees "
                f"with the per-channel path"
            )

    channels = [m.occupancy for m in masks]
    words = packed.words

    def run_one_hot():
        return [transform.apply_to_array(c) for c in channels]

    def run_packed():
        return transform.apply_to_array(words)

    med_o, min_o, max_o = _median_timing(run_one_hot, repetitions)
    med_p, min_p, max_p = _median_timing(run_packed, repetitions)

    voxels = dims[0] * dims[1] * dims[2]
    return TransformComparison(
        one_hot=BenchReport(
            scenario=f"one-hot {transform.kind}", roi_count=roi_count, dims=dims,
            median_ns=med_o, min_ns=min_o, max_ns=max_o, repetitions=repetitions,
            bytes_moved=2 * roi_count * voxels, peak_mask_bytes=roi_count * voxels,
        ),
        packed=BenchReport(
            scenario=f"packed {transform.kind}", roi_count=roi_count, dims=dims,
            median_ns=med_p, min_ns=min_p, max_ns=max_p, repetitions=repetitions,
            bytes_moved=2 * 4 * voxels, peak_mask_bytes=4 * voxels,
        ),
    )


def speedup_curve(
    dims: tuple[int, int, int],
    roi_counts: tuple[int, ...] = (1, 2, 4, 8, 16, 30),
    transform: VoxelPermutation | None = None,
    repetitions: int = 11,
    seed: int = 0,
) -> list[tuple[int, float]]:
    """Speedup per ROI count; the advantage should not decrease with more ROIs."""
    return [
        (n, bench_transform(dims, n, transform, repetitions, seed).speedup)
        for n in roi_counts
    ]


def is_monotone_speedup(curve: list[tuple[int, float]]) -> bool:
    values = [s for _, s in curve]
    return all(b >= a * MONOTONE_NOISE_FACTOR for a, b in zip(values, values[1:]))


def _mean_aim_template(roi_count: int) -> str:
    rows = [
        {
            "roi": f"R{i:02d}", "class": "oar",
            "metric": {"kind": "D_mean"},
            "aim": {"op": "<=", "value": 1e9, "unit": "gy"},
            "loss_weight": 0.1,
        }
        for i in range(1, roi_count + 1)
    ]
    return json.dumps({"prescriptions": {}, "lambda": {"mae": 1.0, "cdm": 0.5},
                       "specs": rows})


def bench_memory(dims: tuple[int, int, int], roi_count: int, seed: int = 0) -> MemoryComparison:
    """Working-set comparison plus the decoded-mask residency contract.

    Reports raw bytes for ``roi_count`` one-byte boolean channels against a
    single 4-byte word volume, and runs a loss evaluation with decode
    accounting to confirm at most one decoded mask is alive at a time.
    """
    masks = random_masks(dims, roi_count, seed=seed)
    packed = encode(masks)
    nx, ny, nz = dims
    voxels = nx * ny * nz

    template = parse_template(_mean_aim_template(roi_count))
    cfg = LossConfig.for_template(template)
    rng = np.random.default_rng(seed + 1)
    pred = DoseGrid(dims, (2.0, 2.0, 2.0), rng.uniform(0, 70, (nz, ny, nx)))
    gt = DoseGrid(dims, (2.0, 2.0, 2.0), rng.uniform(0, 70, (nz, ny, nx)))
    accounting = MaskAccounting()
    cdm_loss(pred, gt, packed, cfg, with_grad=True, accounting=accounting)

    return MemoryComparison(
        one_hot_bytes=roi_count * voxels,
        packed_bytes=4 * voxels,
        storage_ratio=roi_count / 4.0,
        peak_decoded_masks=accounting.peak,
        peak_decoded_mask_bytes=accounting.peak * voxels,
    )
