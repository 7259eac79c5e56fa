"""Single-file NIfTI-1 reading and writing for CT volumes and lung masks.

Only the subset of NIfTI-1 the pipeline needs is handled: 3D scalar volumes
stored as uint8, int16 or float32, optionally gzip-compressed. Orientation
affines are ignored; only pixdim[1..3] is kept as voxel spacing.
"""

from __future__ import annotations

import gzip
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Tuple

import numpy as np

from .errors import (
    DimMismatch,
    IoFailure,
    MalformedHeader,
    MissingMagic,
    NonFiniteVoxel,
    TruncatedData,
    UnsupportedDatatype,
)

HEADER_SIZE = 348
MAGIC = b"n+1\x00"
MAGIC_OFFSET = 344

DT_UINT8 = 2
DT_INT16 = 4
DT_FLOAT32 = 16

# NIfTI datatype code -> numpy element type (byte order applied at read time)
DATATYPES = {
    DT_UINT8: np.dtype("u1"),
    DT_INT16: np.dtype("i2"),
    DT_FLOAT32: np.dtype("f4"),
}
INTEGER_DATATYPES = (DT_UINT8, DT_INT16)


@dataclass(frozen=True)
class VolumeHeader:
    dims: Tuple[int, int, int]
    spacing: Tuple[float, float, float]
    datatype_code: int = DT_FLOAT32
    scl_slope: float = 1.0
    scl_inter: float = 0.0
    byte_order: str = "<"

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(d) < 1 for d in self.dims):
            raise MalformedHeader(f"dims must be 3 positive integers, got {self.dims}")
        if len(self.spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in self.spacing):
            raise MalformedHeader(f"spacing must be 3 positive reals, got {self.spacing}")
        if self.datatype_code not in DATATYPES:
            raise UnsupportedDatatype(f"datatype code {self.datatype_code} is not supported")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))


@dataclass(frozen=True)
class Volume:
    """A 3D intensity grid indexed ``data[x, y, z]``."""

    header: VolumeHeader
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.shape != self.header.dims:
            raise DimMismatch(f"data shape {data.shape} does not match dims {self.header.dims}")
        if not np.isfinite(data).all():
            raise NonFiniteVoxel("volume contains NaN or Inf voxels")
        if data is self.data:
            data = data.copy()
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def dims(self):
        return self.header.dims

    @property
    def spacing(self):
        return self.header.spacing

    @classmethod
    def from_array(cls, data, spacing=(1.0, 1.0, 1.0)) -> "Volume":
        data = np.asarray(data, dtype=np.float32)
        return cls(VolumeHeader(dims=data.shape, spacing=tuple(spacing)), data)


@dataclass(frozen=True)
class MaskVolume:
    dims: Tuple[int, int, int]
    data: np.ndarray = field(repr=False)
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.shape != tuple(self.dims):
            raise DimMismatch(f"mask shape {data.shape} does not match dims {self.dims}")
        if not np.isin(data, (0, 1)).all():
            raise MalformedHeader("mask values must be 0 or 1")
        data = data.astype(np.uint8, copy=True)
        data.flags.writeable = False
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, data, spacing=(1.0, 1.0, 1.0)) -> "MaskVolume":
        data = np.asarray(data)
        return cls(data.shape, data, tuple(spacing))


def _read_bytes(path) -> bytes:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError, zlib.error) as exc:
            raise TruncatedData(f"{path}: corrupt gzip stream ({exc})") from exc
    return raw


def _byte_order(raw: bytes) -> str:
    # dim[0] lies in 1..7 only when read with the writer's byte order
    for order in ("<", ">"):
        (dim0,) = struct.unpack_from(order + "h", raw, 40)
        if 1 <= dim0 <= 7:
            return order
    raise MalformedHeader("dim[0] is outside 1..7 under both byte orders")


def parse_header(raw: bytes):
    """Decode the 348-byte header. Returns ``(VolumeHeader, vox_offset)``."""
    if len(raw) < HEADER_SIZE:
        raise TruncatedData(f"header needs {HEADER_SIZE} bytes, got {len(raw)}")
    if raw[MAGIC_OFFSET:MAGIC_OFFSET + 4] != MAGIC:
        raise MissingMagic("magic 'n+1\\0' not found at offset 344")
    order = _byte_order(raw)
    (sizeof_hdr,) = struct.unpack_from(order + "i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        raise MalformedHeader(f"sizeof_hdr is {sizeof_hdr}, expected 348")
    dim = struct.unpack_from(order + "8h", raw, 40)
    (datatype,) = struct.unpack_from(order + "h", raw, 70)
    pixdim = struct.unpack_from(order + "8f", raw, 76)
    vox_offset, slope, inter = struct.unpack_from(order + "3f", raw, 108)

    ndim = dim[0]
    if ndim < 3 or any(d != 1 for d in dim[4:ndim + 1]):
        raise MalformedHeader(f"expected a 3D volume, got dim={dim[:ndim + 1]}")
    dims = tuple(dim[1:4])
    if any(d < 1 for d in dims):
        raise MalformedHeader(f"non-positive dimension in {dims}")
    if datatype not in DATATYPES:
        raise UnsupportedDatatype(f"datatype code {datatype} is not supported")
    spacing = tuple(abs(float(p)) for p in pixdim[1:4])
    if not all(np.isfinite(s) and s > 0 for s in spacing):
        raise MalformedHeader(f"invalid pixdim spacing {spacing}")
    if not (np.isfinite(vox_offset) and vox_offset >= HEADER_SIZE):
        raise MalformedHeader(f"invalid vox_offset {vox_offset}")
    if not (np.isfinite(slope) and np.isfinite(inter)):
        raise MalformedHeader("non-finite scl_slope/scl_inter")
    if slope == 0:
        slope = 1.0
    header = VolumeHeader(dims, spacing, datatype, float(slope), float(inter), order)
    return header, int(vox_offset)


def _read_raw(path):
    raw = _read_bytes(path)
    header, offset = parse_header(raw)
    dtype = DATATYPES[header.datatype_code].newbyteorder(header.byte_order)
    count = int(np.prod(header.dims))
    available = max(len(raw) - offset, 0) // dtype.itemsize
    if available < count:
        raise TruncatedData(
            f"{path}: data section holds {available} elements, dims need {count}")
    values = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    return header, values.reshape(header.dims, order="F")


def read_nifti(path) -> Volume:
    """Read a NIfTI-1 volume and apply the slope/intercept rescale."""
    header, values = _read_raw(path)
    data = values.astype(np.float64) * header.scl_slope + header.scl_inter
    if not np.isfinite(data).all():
        raise NonFiniteVoxel(f"{path}: volume contains NaN or Inf voxels")
    data = data.astype(np.float32)
    if not np.isfinite(data).all():
        raise NonFiniteVoxel(f"{path}: rescaled values overflow float32")
    return Volume(header, data)


def read_mask(path, expected_dims=None) -> MaskVolume:
    """Read an integer-typed label volume and binarize it with ``label > 0``."""
    header, values = _read_raw(path)
    if header.datatype_code not in INTEGER_DATATYPES:
        raise UnsupportedDatatype(f"{path}: mask must have an integer datatype")
    if expected_dims is not None and tuple(expected_dims) != header.dims:
        raise DimMismatch(f"{path}: mask dims {header.dims} != expected {tuple(expected_dims)}")
    labels = values.astype(np.float64) * header.scl_slope + header.scl_inter
    return MaskVolume(header.dims, (labels > 0).astype(np.uint8), header.spacing)


def encode_nifti(data: np.ndarray, spacing, datatype_code: int = DT_FLOAT32) -> bytes:
    """Serialize a 3D array as a little-endian single-file NIfTI-1 byte string."""
    if datatype_code not in DATATYPES:
        raise UnsupportedDatatype(f"datatype code {datatype_code} is not supported")
    data = np.asarray(data)
    if data.ndim != 3:
        raise DimMismatch(f"expected a 3D array, got shape {data.shape}")
    dtype = DATATYPES[datatype_code].newbyteorder("<")
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *data.shape, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, datatype_code, dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<3f", hdr, 108, 352.0, 1.0, 0.0)
    struct.pack_into("<b", hdr, 123, 10)  # xyzt_units: mm, s
    hdr[MAGIC_OFFSET:MAGIC_OFFSET + 4] = MAGIC
    payload = np.asarray(data, dtype=dtype).tobytes(order="F")
    return bytes(hdr) + b"\x00" * 4 + payload


def write_nifti(volume: Volume, path, datatype_code: int = DT_FLOAT32) -> None:
    """Write ``volume`` uncompressed with slope 1 and intercept 0."""
    _write(path, encode_nifti(volume.data, volume.spacing, datatype_code))


def write_mask(mask: MaskVolume, path) -> None:
    _write(path, encode_nifti(mask.data, mask.spacing, DT_UINT8))


def _write(path, blob: bytes) -> None:
    try:
        Path(path).write_bytes(blob)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
