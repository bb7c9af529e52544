"""Lossless packing of up to 32 overlapping ROI masks into one uint32 volume.

ROI ``i`` (1-based) occupies bit ``i - 1`` of every word, so overlapping
structures simply set multiple bits. Geometric lattice permutations (axis
flips, 90-degree rotations, integer translations) are applied once to the
packed words and commute with decoding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .volumes import RoiMask, VolumeFormatError

__all__ = [
    "WORD_BITS",
    "BitMaskVolume",
    "VoxelPermutation",
    "MaskAccounting",
    "encode",
]

WORD_BITS = 32  # uint32 words; more ROIs than this is a hard error


class MaskAccounting:
    """Counts decoded masks that are simultaneously alive.

    The loss evaluator decodes one ROI at a time and releases it before the
    next; this counter makes that memory contract assertable.
    """

    def __init__(self) -> None:
        self.live = 0
        self.peak = 0
        self.total_decodes = 0

    def note_decode(self) -> None:
        self.live += 1
        self.total_decodes += 1
        self.peak = max(self.peak, self.live)

    def note_release(self) -> None:
        if self.live <= 0:
            raise RuntimeError("release without matching decode")
        self.live -= 1


@dataclass(frozen=True)
class BitMaskVolume:
    """Packed multi-ROI mask volume: one uint32 word per voxel."""

    dims: tuple[int, int, int]
    spacing_mm: tuple[float, float, float]
    words: np.ndarray  # uint32, shape (nz, ny, nx)
    roi_table: dict[str, int]  # name -> bit index in [1, 32], insertion-ordered

    def __post_init__(self) -> None:
        nx, ny, nz = self.dims
        w = np.ascontiguousarray(np.asarray(self.words, dtype=np.uint32))
        if w.shape != (nz, ny, nx):
            if w.size != nx * ny * nz:
                raise VolumeFormatError(f"word count {w.size} does not match dims {self.dims}")
            w = w.reshape((nz, ny, nx))
        w = w.view()  # freeze our view, never a caller-owned buffer
        object.__setattr__(self, "words", w)
        self.words.setflags(write=False)

        table = dict(self.roi_table)
        if not table:
            raise VolumeFormatError("roi_table is empty")
        if len(table) > WORD_BITS:
            raise VolumeFormatError(f"{len(table)} ROIs exceed the {WORD_BITS}-bit word width")
        indices = sorted(table.values())
        if indices != list(range(1, len(table) + 1)):
            raise VolumeFormatError(f"roi_table bit indices must be contiguous from 1, got {indices}")
        object.__setattr__(self, "roi_table", table)

        n_roi = len(table)
        if n_roi < WORD_BITS:
            stray = self.words >> np.uint32(n_roi)
            if stray.any():
                raise VolumeFormatError(f"words carry bits above position {n_roi}")

    @property
    def n_roi(self) -> int:
        return len(self.roi_table)

    def bit_index(self, roi: str | int) -> int:
        if isinstance(roi, str):
            try:
                return self.roi_table[roi]
            except KeyError:
                raise KeyError(f"unknown ROI name {roi!r}") from None
        idx = int(roi)
        if not 1 <= idx <= self.n_roi:
            raise IndexError(f"bit index {idx} out of range [1, {self.n_roi}]")
        return idx

    def roi_name(self, bit: int) -> str:
        for name, idx in self.roi_table.items():
            if idx == bit:
                return name
        raise IndexError(f"no ROI at bit index {bit}")

    def decode(self, roi: str | int, accounting: MaskAccounting | None = None) -> RoiMask:
        """Extract one ROI's binary mask via a single bitwise AND."""
        idx = self.bit_index(roi)
        occ = (self.words & np.uint32(1 << (idx - 1))) != 0
        if accounting is not None:
            accounting.note_decode()
        return RoiMask(name=self.roi_name(idx), dims=self.dims, occupancy=occ)

    def decode_all(self) -> list[RoiMask]:
        """All ROI masks, in roi_table order; exact inverse of encode."""
        return [self.decode(name) for name in self.roi_table]

    def roi_voxel_count(self, roi: str | int) -> int:
        idx = self.bit_index(roi)
        return int(np.count_nonzero(self.words & np.uint32(1 << (idx - 1))))


def encode(
    masks: list[RoiMask],
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> BitMaskVolume:
    """Pack an ordered list of ROI masks into one bit-mask volume.

    Mask order determines bit assignment: the i-th mask (1-based) gets bit
    i - 1. Requires 1..32 masks with identical dims and unique names.
    """
    if not masks:
        raise ValueError("need at least one mask")
    if len(masks) > WORD_BITS:
        raise ValueError(f"{len(masks)} masks exceed the {WORD_BITS}-bit word width")
    dims = masks[0].dims
    names = set()
    for m in masks:
        if m.dims != dims:
            raise ValueError(f"mask {m.name!r} dims {m.dims} differ from {dims}")
        if m.name in names:
            raise ValueError(f"duplicate ROI name {m.name!r}")
        names.add(m.name)

    nz, ny, nx = dims[2], dims[1], dims[0]
    words = np.zeros((nz, ny, nx), dtype=np.uint32)
    for i, m in enumerate(masks, start=1):
        words |= m.occupancy.astype(np.uint32) << np.uint32(i - 1)
    table = {m.name: i for i, m in enumerate(masks, start=1)}
    return BitMaskVolume(dims=dims, spacing_mm=spacing_mm, words=words, roi_table=table)


_AXIS_TO_ARRAY = {"x": 2, "y": 1, "z": 0}
# in-plane array axes for a rotation about the named axis
_ROTATION_PLANES = {"z": (1, 2), "x": (0, 1), "y": (0, 2)}


@dataclass(frozen=True)
class VoxelPermutation:
    """A lattice-exact voxel rearrangement: flip, 90-degree rotation,
    integer translation with zero fill, or a composition of those.

    Acts identically on any volume of matching dims, so one application to
    the packed words transforms every encoded ROI at once.
    """

    kind: str  # "identity" | "flip" | "rotate" | "translate" | "compose"
    axis: str | None = None
    turns: int = 1
    offset: tuple[int, int, int] = (0, 0, 0)
    steps: tuple["VoxelPermutation", ...] = field(default_factory=tuple)

    @classmethod
    def identity(cls) -> "VoxelPermutation":
        return cls(kind="identity")

    @classmethod
    def flip(cls, axis: str) -> "VoxelPermutation":
        if axis not in _AXIS_TO_ARRAY:
            raise ValueError(f"unknown axis {axis!r}")
        return cls(kind="flip", axis=axis)

    @classmethod
    def rotate(cls, axis: str, turns: int = 1) -> "VoxelPermutation":
        if axis not in _ROTATION_PLANES:
            raise ValueError(f"unknown axis {axis!r}")
        return cls(kind="rotate", axis=axis, turns=turns % 4)

    @classmethod
    def translate(cls, dx: int, dy: int, dz: int) -> "VoxelPermutation":
        return cls(kind="translate", offset=(int(dx), int(dy), int(dz)))

    @classmethod
    def compose(cls, *steps: "VoxelPermutation") -> "VoxelPermutation":
        return cls(kind="compose", steps=tuple(steps))

    def apply_to_array(self, arr: np.ndarray) -> np.ndarray:
        """Apply to any (nz, ny, nx) array; returns a new contiguous array."""
        if self.kind == "identity":
            return np.ascontiguousarray(arr).copy()
        if self.kind == "flip":
            return np.ascontiguousarray(np.flip(arr, _AXIS_TO_ARRAY[self.axis]))
        if self.kind == "rotate":
            a, b = _ROTATION_PLANES[self.axis]
            if self.turns % 2 == 1 and arr.shape[a] != arr.shape[b]:
                raise ValueError(
                    f"quarter-turn about {self.axis!r} needs equal axis lengths, "
                    f"got {arr.shape[b]} and {arr.shape[a]}"
                )
            return np.ascontiguousarray(np.rot90(arr, self.turns, axes=(a, b)))
        if self.kind == "translate":
            out = np.zeros_like(arr)
            src = [slice(None)] * 3
            dst = [slice(None)] * 3
            for axis_name, shift in zip(("x", "y", "z"), self.offset):
                ax = _AXIS_TO_ARRAY[axis_name]
                n = arr.shape[ax]
                if abs(shift) >= n:
                    return out  # shifted fully out of the grid
                if shift > 0:
                    dst[ax] = slice(shift, None)
                    src[ax] = slice(None, n - shift)
                elif shift < 0:
                    dst[ax] = slice(None, n + shift)
                    src[ax] = slice(-shift, None)
            out[tuple(dst)] = arr[tuple(src)]
            return out
        if self.kind == "compose":
            for step in self.steps:
                arr = step.apply_to_array(arr)
            return np.ascontiguousarray(arr)
        raise ValueError(f"unknown permutation kind {self.kind!r}")

    def apply_to_mask(self, mask: RoiMask) -> RoiMask:
        occ = self.apply_to_array(mask.occupancy)
        return RoiMask(name=mask.name, dims=mask.dims, occupancy=occ)

    def apply(self, volume: BitMaskVolume) -> BitMaskVolume:
        """Transform all encoded ROIs at once by permuting the packed words."""
        words = self.apply_to_array(volume.words)
        return BitMaskVolume(
            dims=volume.dims,
            spacing_mm=volume.spacing_mm,
            words=words,
            roi_table=dict(volume.roi_table),
        )


def apply_permutation(volume: BitMaskVolume, transform: VoxelPermutation) -> BitMaskVolume:
    return transform.apply(volume)
