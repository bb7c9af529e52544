"""Dose-grid and ROI-mask data model plus bit-exact container file I/O.

Volumes live on a regular 3D lattice addressed as (x, y, z) with dims
(nx, ny, nz) and z-major linear order (z slowest). Arrays are stored with
shape (nz, ny, nx) so that C-order flattening yields the on-disk order.
All metric and loss arithmetic downstream runs in float64 regardless of
the 32-bit storage dtype.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "DoseGrid",
    "RoiMask",
    "VolumeFormatError",
    "load_volume",
    "save_volume",
    "rescale_dose",
]


class VolumeFormatError(ValueError):
    """Raised when a volume container or its payload fails validation."""


def _as_zyx(dims: tuple[int, int, int]) -> tuple[int, int, int]:
    nx, ny, nz = dims
    return (nz, ny, nx)


@dataclass(frozen=True)
class DoseGrid:
    """A 3D scalar dose volume.

    ``values`` holds one dose per voxel in the grid's native unit; the
    physical dose in Gy is ``values * unit_scale``. ``unit_scale`` is the
    factor the raw stored values were divided by (1.0 means values are Gy,
    70.0 means values are normalized to the highest prescription).
    """

    dims: tuple[int, int, int]
    spacing_mm: tuple[float, float, float]
    values: np.ndarray  # float64, shape (nz, ny, nx)
    unit_scale: float = 1.0

    def __post_init__(self) -> None:
        nx, ny, nz = self.dims
        if min(nx, ny, nz) <= 0:
            raise VolumeFormatError(f"dims must be positive, got {self.dims}")
        if min(self.spacing_mm) <= 0:
            raise VolumeFormatError(f"spacing_mm must be positive, got {self.spacing_mm}")
        if self.unit_scale <= 0:
            raise VolumeFormatError(f"unit_scale must be positive, got {self.unit_scale}")
        vals = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        if vals.shape != _as_zyx(self.dims):
            if vals.size != nx * ny * nz:
                raise VolumeFormatError(
                    f"value count {vals.size} does not match dims {self.dims}"
                )
            vals = vals.reshape(_as_zyx(self.dims))
        vals = vals.view()  # freeze our view, never a caller-owned buffer
        object.__setattr__(self, "values", vals)
        bad = ~np.isfinite(vals)
        if bad.any():
            idx = int(np.flatnonzero(bad)[0])
            raise VolumeFormatError(f"non-finite dose at voxel index {idx}")
        neg = vals < 0
        if neg.any():
            idx = int(np.flatnonzero(neg)[0])
            raise VolumeFormatError(f"negative dose at voxel index {idx}")
        self.values.setflags(write=False)

    @property
    def voxel_count(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def voxel_volume_cc(self) -> float:
        sx, sy, sz = self.spacing_mm
        return sx * sy * sz / 1000.0

    def values_gy(self) -> np.ndarray:
        """Physical dose per voxel in Gy."""
        return self.values * self.unit_scale


@dataclass(frozen=True)
class RoiMask:
    """Binary occupancy mask for one ROI on a fixed grid."""

    name: str
    dims: tuple[int, int, int]
    occupancy: np.ndarray  # bool, shape (nz, ny, nx)

    def __post_init__(self) -> None:
        occ = np.ascontiguousarray(np.asarray(self.occupancy, dtype=bool))
        if occ.shape != _as_zyx(self.dims):
            nx, ny, nz = self.dims
            if occ.size != nx * ny * nz:
                raise VolumeFormatError(
                    f"mask size {occ.size} does not match dims {self.dims}"
                )
            occ = occ.reshape(_as_zyx(self.dims))
        occ = occ.view()
        object.__setattr__(self, "occupancy", occ)
        self.occupancy.setflags(write=False)

    @property
    def voxel_count(self) -> int:
        return int(self.occupancy.sum())

    @property
    def is_empty(self) -> bool:
        return not bool(self.occupancy.any())


def _base_path(path: str | Path) -> Path:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p


def _read_header(path: Path) -> dict:
    try:
        header = json.loads(path.read_text())
    except FileNotFoundError:
        raise VolumeFormatError(f"missing header file {path}") from None
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"malformed header {path}: {exc}") from None
    for key in ("dims", "spacing_mm", "dtype", "order", "endian", "kind"):
        if key not in header:
            raise VolumeFormatError(f"header {path} missing field {key!r}")
    if header["order"] != "zyx":
        raise VolumeFormatError(f"unsupported voxel order {header['order']!r}")
    if header["endian"] != "little":
        raise VolumeFormatError(f"unsupported endianness {header['endian']!r}")
    return header


def load_volume(path: str | Path, expected_kind: str | None = None):
    """Load a dose or bit-mask volume from a ``.json`` + ``.raw`` container.

    ``expected_kind`` may be "dose" or "bitmask"; passing the wrong kind for
    the file is an error. Returns a DoseGrid or a BitMaskVolume.
    """
    base = _base_path(path)
    header = _read_header(base.with_suffix(".json"))
    kind = header["kind"]
    if kind not in ("dose", "bitmask"):
        raise VolumeFormatError(f"unknown volume kind {kind!r}")
    if expected_kind is not None and kind != expected_kind:
        raise VolumeFormatError(f"expected {expected_kind} volume, file is {kind!r}")

    dims = tuple(int(d) for d in header["dims"])
    if len(dims) != 3:
        raise VolumeFormatError(f"dims must have 3 entries, got {header['dims']}")
    spacing = tuple(float(s) for s in header["spacing_mm"])
    dtype_name = header["dtype"]
    expected_dtype = "f32" if kind == "dose" else "u32"
    if dtype_name != expected_dtype:
        raise VolumeFormatError(
            f"dtype {dtype_name!r} does not match kind {kind!r} (expected {expected_dtype!r})"
        )

    raw_path = base.with_suffix(".raw")
    try:
        payload = raw_path.read_bytes()
    except FileNotFoundError:
        raise VolumeFormatError(f"missing payload file {raw_path}") from None
    n = dims[0] * dims[1] * dims[2]
    expected_bytes = n * 4
    if len(payload) != expected_bytes:
        raise VolumeFormatError(
            f"payload {raw_path} has {len(payload)} bytes, expected {expected_bytes} for dims {dims}"
        )

    if kind == "dose":
        vals = np.frombuffer(payload, dtype="<f4").astype(np.float64)
        return DoseGrid(
            dims=dims,
            spacing_mm=spacing,
            values=vals.reshape(_as_zyx(dims)),
            unit_scale=float(header.get("unit_scale", 1.0)),
        )

    from .bitmask import BitMaskVolume  # cycle kept import-local

    roi_table = header.get("roi_table")
    if not roi_table:
        raise VolumeFormatError("bitmask header missing roi_table")
    words = np.frombuffer(payload, dtype="<u4").astype(np.uint32)
    return BitMaskVolume(
        dims=dims,
        spacing_mm=spacing,
        words=words.reshape(_as_zyx(dims)),
        roi_table={str(k): int(v) for k, v in roi_table.items()},
    )


def save_volume(volume, path: str | Path) -> None:
    """Write a volume to ``<base>.json`` + ``<base>.raw``.

    Dose payloads are little-endian f32, bit-mask payloads little-endian
    u32, both in z-major order; a reload reproduces the files bit-exactly.
    """
    from .bitmask import BitMaskVolume

    base = _base_path(path)
    header: dict = {
        "dims": list(volume.dims),
        "spacing_mm": [float(s) for s in volume.spacing_mm],
        "order": "zyx",
        "endian": "little",
    }
    if isinstance(volume, BitMaskVolume):
        header["dtype"] = "u32"
        header["kind"] = "bitmask"
        header["unit_scale"] = 1.0
        header["roi_table"] = dict(volume.roi_table)
        payload = np.ascontiguousarray(volume.words, dtype="<u4").tobytes()
    elif isinstance(volume, DoseGrid):
        header["dtype"] = "f32"
        header["kind"] = "dose"
        header["unit_scale"] = float(volume.unit_scale)
        payload = volume.values.astype("<f4").tobytes()
    else:
        raise TypeError(f"cannot save object of type {type(volume).__name__}")

    base.parent.mkdir(parents=True, exist_ok=True)
    base.with_suffix(".json").write_text(json.dumps(header, indent=1) + "\n")
    base.with_suffix(".raw").write_bytes(payload)


def rescale_dose(grid: DoseGrid, target_unit_scale: float) -> DoseGrid:
    """Re-express a dose grid in a different unit scale.

    Physical dose is preserved: values_out * target == values_in * current.
    """
    if target_unit_scale <= 0:
        raise ValueError(f"target unit_scale must be positive, got {target_unit_scale}")
    if target_unit_scale == grid.unit_scale:
        return grid
    factor = grid.unit_scale / target_unit_scale
    return DoseGrid(
        dims=grid.dims,
        spacing_mm=grid.spacing_mm,
        values=grid.values * factor,
        unit_scale=target_unit_scale,
    )
