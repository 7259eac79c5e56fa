"""Resampling, lung cropping, HU normalization and cube resizing.

The chain is always applied in the same order::

    resample -> crop to lung bounding box -> normalize HU -> resize to cube

Grid convention used by every resampler here: output index ``j`` along an
axis maps to input coordinate ``j * (n_in - 1) / (n_out - 1)`` (endpoints
preserved), or to the input centre when ``n_out == 1``.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    BoxOutOfBounds,
    DataError,
    DegenerateOutput,
    DimMismatch,
    EmptyManifest,
    EmptyMask,
    IndivisibleSide,
    InvalidBounds,
)
from .volume_io import MaskVolume, Volume, VolumeHeader, read_mask, read_nifti, write_mask, write_nifti

log = logging.getLogger(__name__)

HU_LO = -200.0
HU_HI = 1200.0


@dataclass(frozen=True)
class SpacingStats:
    mean_spacing: Tuple[float, float, float]
    scan_count: int


@dataclass(frozen=True)
class CropBox:
    lo: Tuple[int, int, int]
    hi: Tuple[int, int, int]

    def __post_init__(self):
        if any(l >= h for l, h in zip(self.lo, self.hi)):
            raise BoxOutOfBounds(f"empty box lo={self.lo} hi={self.hi}")

    @property
    def slices(self):
        return tuple(slice(l, h) for l, h in zip(self.lo, self.hi))


@dataclass(frozen=True)
class ManifestRecord:
    scan: Path
    mask: Path
    label: Optional[int] = None


# -- manifests ---------------------------------------------------------------

def read_manifest(path) -> List[ManifestRecord]:
    """Parse a tab-separated manifest: scan path, mask path, optional label.

    Relative paths are resolved against the manifest's directory.
    """
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    base = path.parent
    records = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.rstrip("\n").split("\t")
        if len(cols) not in (2, 3):
            raise DataError(f"{path}:{lineno}: expected 2 or 3 tab-separated columns")
        label = None
        if len(cols) == 3 and cols[2].strip():
            try:
                label = int(cols[2])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: label {cols[2]!r} is not an integer") from exc
        records.append(ManifestRecord(base / cols[0], base / cols[1], label))
    return records


def write_manifest(records: Sequence[ManifestRecord], path) -> None:
    path = Path(path)
    lines = []
    for rec in records:
        cols = [_relative(rec.scan, path.parent), _relative(rec.mask, path.parent)]
        if rec.label is not None:
            cols.append(str(rec.label))
        lines.append("\t".join(cols))
    path.write_text("\n".join(lines) + "\n")


def _relative(p, base) -> str:
    try:
        return str(Path(p).resolve().relative_to(Path(base).resolve()))
    except ValueError:
        return str(Path(p).resolve())


# -- geometry ----------------------------------------------------------------

def spacing_stats(manifest: Sequence) -> SpacingStats:
    """Per-axis arithmetic mean spacing over a list of volume paths."""
    paths = list(manifest)
    if not paths:
        raise EmptyManifest("manifest is empty")
    spacings = np.array([read_nifti(p).spacing for p in paths], dtype=np.float64)
    return SpacingStats(tuple(float(s) for s in spacings.mean(axis=0)), len(paths))


def _output_dims(dims, spacing, target_spacing):
    target = tuple(float(t) for t in target_spacing)
    if len(target) != 3 or not all(t > 0 for t in target):
        raise DegenerateOutput(f"target spacing must be 3 positive reals, got {target_spacing}")
    out = []
    for n, s, t in zip(dims, spacing, target):
        m = int(np.floor(n * s / t + 0.5))
        if m == 0 and n >= 2:
            raise DegenerateOutput(f"axis of {n} voxels at {s} mm collapses at {t} mm")
        out.append(max(m, 1))
    return tuple(out)


def source_coords(n_in: int, n_out: int) -> np.ndarray:
    if n_out == 1:
        return np.array([(n_in - 1) / 2.0])
    return np.arange(n_out) * ((n_in - 1) / (n_out - 1))


def _linear_axis(a: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    n_in = a.shape[axis]
    if n_in == n_out:
        return a
    pos = source_coords(n_in, n_out)
    i0 = np.clip(np.floor(pos).astype(np.int64), 0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = pos - i0
    shape = [1] * a.ndim
    shape[axis] = n_out
    w = w.reshape(shape)
    return np.take(a, i0, axis=axis) * (1.0 - w) + np.take(a, i1, axis=axis) * w


def _nearest_axis(a: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    n_in = a.shape[axis]
    if n_in == n_out:
        return a
    idx = np.clip(np.floor(source_coords(n_in, n_out) + 0.5).astype(np.int64), 0, n_in - 1)
    return np.take(a, idx, axis=axis)


def _trilinear(data, out_dims):
    a = np.asarray(data, dtype=np.float64)
    for axis, n in enumerate(out_dims):
        a = _linear_axis(a, axis, n)
    return a.astype(np.float32)


def _nearest(data, out_dims):
    a = np.asarray(data)
    for axis, n in enumerate(out_dims):
        a = _nearest_axis(a, axis, n)
    return a


def resample_trilinear(v: Volume, target_spacing) -> Volume:
    out_dims = _output_dims(v.dims, v.spacing, target_spacing)
    header = VolumeHeader(out_dims, tuple(target_spacing))
    return Volume(header, _trilinear(v.data, out_dims))


def resample_mask_nearest(m: MaskVolume, source_spacing, target_spacing) -> MaskVolume:
    out_dims = _output_dims(m.dims, source_spacing, target_spacing)
    return MaskVolume(out_dims, _nearest(m.data, out_dims), tuple(target_spacing))


def mask_bounding_box(m: MaskVolume) -> CropBox:
    """Tightest box (inclusive lo, exclusive hi) around all foreground voxels."""
    nz = np.nonzero(m.data)
    if nz[0].size == 0:
        raise EmptyMask("mask has no foreground voxels")
    lo = tuple(int(ix.min()) for ix in nz)
    hi = tuple(int(ix.max()) + 1 for ix in nz)
    return CropBox(lo, hi)


def _check_box(dims, box: CropBox):
    if any(l < 0 or h > d for l, h, d in zip(box.lo, box.hi, dims)):
        raise BoxOutOfBounds(f"box {box.lo}-{box.hi} exceeds dims {dims}")


def crop(v: Volume, box: CropBox) -> Volume:
    _check_box(v.dims, box)
    data = v.data[box.slices].copy()
    return Volume(VolumeHeader(data.shape, v.spacing), data)


def crop_mask(m: MaskVolume, box: CropBox) -> MaskVolume:
    _check_box(m.dims, box)
    data = m.data[box.slices].copy()
    return MaskVolume(data.shape, data, m.spacing)


def normalize_hu(v: Volume, lo_hu: float = HU_LO, hi_hu: float = HU_HI) -> Volume:
    """Min-max scale ``[lo_hu, hi_hu]`` onto ``[0, 1]``, clamping outside values."""
    if not lo_hu < hi_hu:
        raise InvalidBounds(f"lo_hu {lo_hu} must be below hi_hu {hi_hu}")
    scaled = (v.data.astype(np.float64) - lo_hu) / (hi_hu - lo_hu)
    return Volume(VolumeHeader(v.dims, v.spacing), np.clip(scaled, 0.0, 1.0))


def check_side(side: int, patch: int) -> None:
    if patch < 1 or side < patch or side % patch != 0:
        raise IndivisibleSide(f"cube side {side} is not a positive multiple of patch {patch}")


def _cube_spacing(dims, spacing, side):
    return tuple(s * n / side for s, n in zip(spacing, dims))


def resize_to_cube(v: Volume, side: int, patch: int = 8) -> Volume:
    check_side(side, patch)
    out = (side,) * 3
    return Volume(VolumeHeader(out, _cube_spacing(v.dims, v.spacing, side)), _trilinear(v.data, out))


def resize_mask_to_cube(m: MaskVolume, side: int, patch: int = 8) -> MaskVolume:
    check_side(side, patch)
    out = (side,) * 3
    return MaskVolume(out, _nearest(m.data, out), _cube_spacing(m.dims, m.spacing, side))


# -- pipeline ----------------------------------------------------------------

@dataclass(frozen=True)
class ScanReport:
    scan: str
    in_dims: Tuple[int, int, int]
    in_spacing: Tuple[float, float, float]
    box: CropBox
    out_dims: Tuple[int, int, int]

    def line(self) -> str:
        fmt = lambda t: "x".join(f"{x:g}" for x in t)
        return "\t".join([self.scan, fmt(self.in_dims), fmt(self.in_spacing),
                          fmt(self.box.lo), fmt(self.box.hi), fmt(self.out_dims)])


def preprocess_pair(v: Volume, m: MaskVolume, target_spacing, side: int, patch: int,
                    lo_hu: float = HU_LO, hi_hu: float = HU_HI):
    """Run the full chain on one scan. Returns ``(volume, mask, crop_box)``."""
    check_side(side, patch)
    if m.dims != v.dims:
        raise DimMismatch(f"mask dims {m.dims} differ from volume dims {v.dims}")
    rv = resample_trilinear(v, target_spacing)
    rm = resample_mask_nearest(m, v.spacing, target_spacing)
    box = mask_bounding_box(rm)
    cv = normalize_hu(crop(rv, box), lo_hu, hi_hu)
    cm = crop_mask(rm, box)
    return resize_to_cube(cv, side, patch), resize_mask_to_cube(cm, side, patch), box


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("CTMAE_THREADS", "1")))
    except ValueError:
        return 1


def preprocess_corpus(records: Sequence[ManifestRecord], out_dir, spacing="auto",
                      side: int = 32, patch: int = 8):
    """Preprocess every manifest record into ``out_dir``.

    ``spacing`` is ``"auto"`` (dataset mean from :func:`spacing_stats`) or a
    single isotropic spacing in mm. Writes processed volumes and masks, a new
    manifest ``manifest.tsv`` and a text report ``report.txt``; returns the
    list of :class:`ScanReport`.
    """
    records = list(records)
    if not records:
        raise EmptyManifest("manifest is empty")
    check_side(side, patch)
    for rec in records:
        for p in (rec.scan, rec.mask):
            if not Path(p).exists():
                raise DataError(f"missing file {p}")
    if spacing == "auto":
        target = spacing_stats([r.scan for r in records]).mean_spacing
    else:
        target = (float(spacing),) * 3
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def one(i_rec):
        i, rec = i_rec
        v = read_nifti(rec.scan)
        m = read_mask(rec.mask, v.dims)
        pv, pm, box = preprocess_pair(v, m, target, side, patch)
        stem = f"{i:04d}"
        scan_out, mask_out = out_dir / f"{stem}_ct.nii", out_dir / f"{stem}_mask.nii"
        write_nifti(pv, scan_out)
        write_mask(pm, mask_out)
        report = ScanReport(str(rec.scan), v.dims, v.spacing, box, pv.dims)
        return ManifestRecord(scan_out, mask_out, rec.label), report

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        results = list(pool.map(one, enumerate(records)))
    write_manifest([r for r, _ in results], out_dir / "manifest.tsv")
    reports = [rep for _, rep in results]
    header = "# scan\tin_dims\tin_spacing\tcrop_lo\tcrop_hi\tout_dims"
    fmt_target = "x".join(f"{t:g}" for t in target)
    (out_dir / "report.txt").write_text(
        f"# target_spacing {fmt_target}\n{header}\n" + "".join(r.line() + "\n" for r in reports))
    log.info("preprocessed %d scans at spacing %s", len(reports), fmt_target)
    return reports
