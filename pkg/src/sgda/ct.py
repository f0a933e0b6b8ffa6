"""CT volume plumbing: MetaImage I/O, HU windowing, lung-mask padding,
isotropic resampling, patch extraction and annotation parsing.

Voxel arrays are indexed ``[z, y, x]``; spacing, offsets and world points
are ``(x, y, z)`` tuples, the MetaImage convention.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, ParseError, UsageError

PAD_VALUE = 170
PATCH_EXTENT = 128
HU_MIN, HU_MAX = -1200.0, 600.0
CROP_MARGIN = 8

_MET_TYPES = {"MET_SHORT": np.dtype("<i2"), "MET_UCHAR": np.dtype("u1")}
_REQUIRED = ("DimSize", "ElementSpacing", "Offset", "ElementType", "ElementDataFile")


def round_half_up(x):
    """Round half away from zero (inputs here are non-negative)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass
class Volume:
    voxels: np.ndarray
    spacing: tuple[float, float, float]
    offset: tuple[float, float, float]
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.spacing = tuple(float(s) for s in self.spacing)
        self.offset = tuple(float(o) for o in self.offset)
        if self.voxels.ndim != 3:
            raise DataError(f"volume must be 3-D, got shape {self.voxels.shape}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise DataError(f"spacing must be three positive values, got {self.spacing}")
        if self.mask is not None and self.mask.shape != self.voxels.shape:
            raise DataError(f"mask shape {self.mask.shape} != volume shape {self.voxels.shape}")

    @property
    def shape(self):
        return self.voxels.shape


@dataclass(frozen=True)
class Annotation:
    series_id: str
    center: tuple[float, float, float]
    diameter: float

    def __post_init__(self):
        if not self.diameter > 0:
            raise ParseError(f"{self.series_id}: diameter must be positive, got {self.diameter}")


# ---------------------------------------------------------------------------
# MetaImage


def read_mhd(header_path) -> Volume:
    header_path = Path(header_path)
    fields = {}
    try:
        text = header_path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read {header_path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if "=" not in line:
            raise ParseError(f"{header_path}:{lineno}: expected 'Key = Value'")
        key, value = line.split("=", 1)
        fields[key.strip()] = value.strip()
    for key in _REQUIRED:
        if key not in fields:
            raise ParseError(f"{header_path}: missing key {key}")
    if fields["ElementType"] not in _MET_TYPES:
        raise ParseError(f"{header_path}: unsupported ElementType {fields['ElementType']}")

    def numbers(key, kind=float):
        try:
            vals = [kind(v) for v in fields[key].split()]
        except ValueError as exc:
            raise ParseError(f"{header_path}: key {key} is not numeric: {fields[key]!r}") from exc
        if len(vals) != 3:
            raise ParseError(f"{header_path}: key {key} needs 3 values, got {len(vals)}")
        return vals

    dims = numbers("DimSize", int)
    spacing, offset = numbers("ElementSpacing"), numbers("Offset")
    dtype = _MET_TYPES[fields["ElementType"]]
    raw = header_path.parent / fields["ElementDataFile"]
    try:
        payload = raw.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read payload {raw}: {exc}") from exc
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(payload) != expected:
        raise ParseError(f"{raw}: payload has {len(payload)} bytes, DimSize implies {expected}")
    x, y, z = dims
    voxels = np.frombuffer(payload, dtype=dtype).reshape(z, y, x).astype(dtype.newbyteorder("="))
    return Volume(voxels, tuple(spacing), tuple(offset))


def write_mhd(header_path, voxels: np.ndarray, spacing, offset) -> None:
    header_path = Path(header_path)
    kind = {np.dtype("int16"): "MET_SHORT", np.dtype("uint8"): "MET_UCHAR"}.get(voxels.dtype)
    if kind is None:
        raise UsageError(f"cannot write voxels of dtype {voxels.dtype} as MetaImage")
    raw = header_path.with_suffix(".raw")
    z, y, x = voxels.shape
    header = [
        "ObjectType = Image", "NDims = 3",
        f"DimSize = {x} {y} {z}",
        "ElementSpacing = " + " ".join(repr(float(s)) for s in spacing),
        "Offset = " + " ".join(repr(float(o)) for o in offset),
        f"ElementType = {kind}",
        f"ElementDataFile = {raw.name}",
    ]
    header_path.write_text("\n".join(header) + "\n")
    raw.write_bytes(np.ascontiguousarray(voxels).astype(voxels.dtype.newbyteorder("<")).tobytes())


def read_volume_with_mask(scan_path, mask_path=None) -> Volume:
    vol = read_mhd(scan_path)
    if mask_path is not None:
        mask = read_mhd(mask_path)
        if mask.shape != vol.shape:
            raise DataError(f"mask {mask_path} shape {mask.shape} != scan shape {vol.shape}")
        vol.mask = mask.voxels != 0
    return vol


# ---------------------------------------------------------------------------
# intensity


def hu_window(v: Volume) -> Volume:
    hu = np.clip(v.voxels.astype(np.float64), HU_MIN, HU_MAX)
    # multiply before dividing so integer inputs hit exact halves (-300 -> 127.5)
    scaled = (hu - HU_MIN) * 255.0 / (HU_MAX - HU_MIN)
    return replace(v, voxels=round_half_up(scaled).astype(np.uint8))


def apply_mask_padding(v: Volume) -> Volume:
    if v.mask is None:
        raise UsageError("mask padding requested but the volume has no lung mask")
    return replace(v, voxels=np.where(v.mask, v.voxels, np.uint8(PAD_VALUE)).astype(np.uint8))


def mask_bbox(mask: np.ndarray, margin: int = CROP_MARGIN) -> tuple[tuple[int, int, int], tuple[int, int, int]]:
    """[lo, hi) voxel box ([z, y, x]) around the mask, grown by ``margin`` and clipped."""
    if not mask.any():
        raise DataError("lung mask is empty")
    idx = np.nonzero(mask)
    lo = tuple(max(int(i.min()) - margin, 0) for i in idx)
    hi = tuple(min(int(i.max()) + 1 + margin, n) for i, n in zip(idx, mask.shape))
    return lo, hi


def crop_to_mask(v: Volume, margin: int = CROP_MARGIN) -> tuple[Volume, tuple[int, int, int]]:
    """Crop to the mask's bounding box; returns the volume and its ``(x, y, z)`` corner."""
    (z0, y0, x0), (z1, y1, x1) = mask_bbox(v.mask, margin)
    corner = (x0, y0, z0)
    offset = tuple(o + c * s for o, c, s in zip(v.offset, corner, v.spacing))
    return Volume(v.voxels[z0:z1, y0:y1, x0:x1], v.spacing, offset,
                  v.mask[z0:z1, y0:y1, x0:x1]), corner


# ---------------------------------------------------------------------------
# geometry


def resampled_extent(extent: int, spacing: float, target: float) -> int:
    # snap away binary noise first: 5 * 0.7 is 3.4999999999999996, meant as 3.5
    return int(round_half_up(np.round(extent * spacing / target, 9)))


def _interp_axis(a: np.ndarray, axis: int, n_out: int, step: float) -> np.ndarray:
    n_in = a.shape[axis]
    pos = np.minimum(np.arange(n_out) * step, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    shape = [1] * a.ndim
    shape[axis] = n_out
    frac = frac.reshape(shape)
    return np.take(a, lo, axis=axis) * (1 - frac) + np.take(a, hi, axis=axis) * frac


def resample_isotropic(v: Volume, target: float = 1.0) -> Volume:
    """Trilinear resampling onto a ``target`` mm grid sharing voxel (0,0,0)'s world position.

    Output voxel ``i`` samples input coordinate ``i * target / spacing``; samples
    past the last input voxel clamp to the edge.  u8 input is rounded back to u8,
    other dtypes come back as float64.  The mask uses nearest-lower lookup.
    """
    if target <= 0:
        raise UsageError(f"target spacing must be positive, got {target}")
    sx, sy, sz = v.spacing
    out_shape = [resampled_extent(n, s, target) for n, s in zip(v.shape, (sz, sy, sx))]
    if min(out_shape) < 1:
        raise DataError(f"resampling {v.shape} at spacing {v.spacing} gives empty extent {out_shape}")
    if v.spacing == (target,) * 3:
        return replace(v, spacing=(target,) * 3)
    data = v.voxels.astype(np.float64)
    for axis, (n, s) in enumerate(zip(out_shape, (sz, sy, sx))):
        data = _interp_axis(data, axis, n, target / s)
    if v.voxels.dtype == np.uint8:
        data = round_half_up(data).astype(np.uint8)
    mask = None
    if v.mask is not None:
        idx = [np.minimum((np.arange(n) * target / s).astype(int), m - 1)
               for n, s, m in zip(out_shape, (sz, sy, sx), v.shape)]
        mask = v.mask[np.ix_(*idx)]
    return Volume(data, (target,) * 3, v.offset, mask)


def world_to_voxel(p_world, v: Volume) -> np.ndarray:
    """World ``(x, y, z)`` mm -> fractional voxel ``(x, y, z)``."""
    return (np.asarray(p_world, float) - np.asarray(v.offset)) / np.asarray(v.spacing)


def voxel_to_world(p_voxel, v: Volume) -> np.ndarray:
    return np.asarray(p_voxel, float) * np.asarray(v.spacing) + np.asarray(v.offset)


def extract_patch(voxels: np.ndarray, corner_zyx: Sequence[int], extent: int = PATCH_EXTENT,
                  pad: int = PAD_VALUE) -> np.ndarray:
    """``1 x extent^3`` patch whose [0,0,0] voxel sits at ``corner_zyx``; outside is ``pad``."""
    out = np.full((extent,) * 3, pad, dtype=voxels.dtype)
    src, dst = [], []
    for c, n in zip(corner_zyx, voxels.shape):
        lo, hi = max(c, 0), min(c + extent, n)
        if lo >= hi:
            return out[None]
        src.append(slice(lo, hi))
        dst.append(slice(lo - c, hi - c))
    out[tuple(dst)] = voxels[tuple(src)]
    return out[None]


# ---------------------------------------------------------------------------
# annotations


def _float(value: str, path, lineno: int, column: str) -> float:
    try:
        out = float(value)
    except ValueError:
        raise ParseError(f"{path}:{lineno}: column {column} is not numeric: {value!r}") from None
    if not np.isfinite(out):
        raise ParseError(f"{path}:{lineno}: column {column} is not finite")
    return out


def parse_annotations(path, fmt: str = "center_diameter") -> list[Annotation]:
    """Rows are ``id,x,y,z,diameter`` or ``id,x1,y1,z1,x2,y2,z2`` after one header row."""
    widths = {"center_diameter": 5, "corner_pair": 7}
    if fmt not in widths:
        raise UsageError(f"unknown annotation format {fmt!r}")
    out = []
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    for lineno, row in enumerate(rows[1:], 2):
        if not row or not "".join(row).strip():
            continue
        if len(row) != widths[fmt]:
            raise ParseError(f"{path}:{lineno}: expected {widths[fmt]} fields, got {len(row)}")
        nums = [_float(v, path, lineno, i + 1) for i, v in enumerate(row[1:])]
        if fmt == "center_diameter":
            center, diameter = tuple(nums[:3]), nums[3]
        else:
            a, b = np.array(nums[:3]), np.array(nums[3:])
            center, diameter = tuple((a + b) / 2), float(np.max(np.abs(b - a)))
        if not diameter > 0:
            raise ParseError(f"{path}:{lineno}: diameter must be positive, got {diameter}")
        out.append(Annotation(row[0].strip(), tuple(float(c) for c in center), float(diameter)))
    return out


def write_annotations(path, annotations: Sequence[Annotation]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seriesuid", "coordX", "coordY", "coordZ", "diameter_mm"])
        for a in annotations:
            w.writerow([a.series_id, *(repr(float(c)) for c in a.center), repr(float(a.diameter))])


# ---------------------------------------------------------------------------
# full preprocessing


def preprocess(v: Volume, target: float = 1.0, margin: int = CROP_MARGIN) -> tuple[Volume, dict]:
    """Window, pad outside the lungs, crop to the lungs, resample.

    Returns the u8 volume and a sidecar dict; ``sidecar['offset']`` is the world
    position of the output's voxel (0,0,0), so coordinates map back exactly.
    """
    w = hu_window(v)
    crop_corner = (0, 0, 0)
    if v.mask is not None:
        w = apply_mask_padding(w)
        w, crop_corner = crop_to_mask(w, margin)
    r = resample_isotropic(w, target)
    sidecar = {"spacing": list(r.spacing), "offset": list(r.offset),
               "crop_corner": list(crop_corner), "source_spacing": list(v.spacing),
               "source_offset": list(v.offset)}
    return r, sidecar


def write_sidecar(path, sidecar: dict) -> None:
    Path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def read_sidecar(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read sidecar {path}: {exc}") from exc
