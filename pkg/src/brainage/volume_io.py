"""Volumetric containers and I/O: the internal .vol format plus a minimal
NIfTI-1 reader.

.vol layout (little-endian, 40-byte header):
    magic "BVOL" | u32 version=1 | u32 nx,ny,nz | f32 sx,sy,sz |
    u8 modality {0=unknown,1=T1w,2=T2w,3=FA} | 3 pad bytes | u32 reserved=0 |
    f32 payload, x fastest

NIfTI-1 support is read-only and deliberately minimal: single-file .nii,
both endiannesses, scl_slope/scl_inter applied, no orientation handling.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError

MODALITIES = ("T1w", "T2w", "FA")

_VOL_MAGIC = b"BVOL"
_VOL_VERSION = 1
_MODALITY_CODES = {"unknown": 0, "T1w": 1, "T2w": 2, "FA": 3}
_CODE_MODALITIES = {v: k for k, v in _MODALITY_CODES.items()}
_HEADER = struct.Struct("<4sI3I3fB3xI")  # 40 bytes
assert _HEADER.size == 40


@dataclass
class Volume:
    """Dense 3-D scalar grid with voxel spacing and a modality tag.

    `voxels` is float32 with shape (nx, ny, nz), indexed voxels[x, y, z];
    serialization is x-fastest.
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    modality: str
    voxels: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        if any(d <= 0 for d in self.dims):
            raise ValueError(f"volume dims must be positive, got {self.dims}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"voxel spacing must be positive, got {self.spacing}")
        if self.modality not in _MODALITY_CODES:
            raise ValueError(f"unknown modality {self.modality!r}")
        self.voxels = np.asarray(self.voxels, dtype=np.float32).reshape(self.dims)

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz


def write_vol(path, v: Volume) -> None:
    nx, ny, nz = v.dims
    header = _HEADER.pack(
        _VOL_MAGIC, _VOL_VERSION, nx, ny, nz,
        *v.spacing, _MODALITY_CODES[v.modality], 0,
    )
    payload = np.ascontiguousarray(v.voxels.astype("<f4").transpose(2, 1, 0))
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload.tobytes())


def read_vol(path) -> Volume:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than the {_HEADER.size}-byte header")
    magic, version, nx, ny, nz, sx, sy, sz, mcode, _reserved = _HEADER.unpack_from(raw)
    if magic != _VOL_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {_VOL_MAGIC!r}")
    if version > _VOL_VERSION:
        raise FormatError(f"{path}: unsupported .vol version {version} (reader supports <= {_VOL_VERSION})")
    if mcode not in _CODE_MODALITIES:
        raise FormatError(f"{path}: unknown modality code {mcode}")
    expected = nx * ny * nz * 4
    payload = raw[_HEADER.size:]
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {expected} for dims ({nx},{ny},{nz})")
    voxels = np.frombuffer(payload, dtype="<f4").reshape((nz, ny, nx)).transpose(2, 1, 0)
    return Volume((nx, ny, nz), (sx, sy, sz), _CODE_MODALITIES[mcode], voxels)


# ---------------------------------------------------------------------------
# NIfTI-1

_NIFTI_DTYPES = {2: "u1", 4: "i2", 8: "i4", 16: "f4", 64: "f8"}
_NIFTI_HDR_SIZE = 348


def read_nifti1(path) -> Volume:
    """Read a single-file NIfTI-1 (.nii) volume as float32, modality unknown.

    Handles both endiannesses; applies scl_slope/scl_inter when slope != 0.
    Orientation, compression, extensions and .hdr/.img pairs are out of scope.
    """
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _NIFTI_HDR_SIZE:
        raise FormatError(f"{path}: shorter than the {_NIFTI_HDR_SIZE}-byte NIfTI-1 header")

    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr == _NIFTI_HDR_SIZE:
        bo = "<"
    else:
        (sizeof_hdr,) = struct.unpack_from(">i", raw, 0)
        if sizeof_hdr != _NIFTI_HDR_SIZE:
            raise FormatError(f"{path}: sizeof_hdr is not 348 in either byte order; not NIfTI-1")
        bo = ">"

    magic = struct.unpack_from("4s", raw, 344)[0]
    if magic == b"ni1\x00":
        raise FormatError(f"{path}: .hdr/.img pair files are unsupported (single-file .nii only)")
    if magic != b"n+1\x00":
        raise FormatError(f"{path}: bad NIfTI-1 magic {magic!r}")

    dim = struct.unpack_from(bo + "8h", raw, 40)
    datatype, _bitpix = struct.unpack_from(bo + "2h", raw, 70)
    pixdim = struct.unpack_from(bo + "8f", raw, 76)
    vox_offset, scl_slope, scl_inter = struct.unpack_from(bo + "3f", raw, 108)

    ndim = dim[0]
    if ndim < 1 or ndim > 7:
        raise FormatError(f"{path}: dim[0]={ndim} outside 1..7")
    extents = [max(1, dim[i]) for i in range(1, 8)]
    if ndim > 3 and any(e > 1 for e in extents[3:ndim]):
        raise FormatError(f"{path}: >3-D data unsupported (dim={dim[: ndim + 1]})")
    nx, ny, nz = extents[0], extents[1], extents[2]

    if datatype not in _NIFTI_DTYPES:
        raise FormatError(f"{path}: unsupported NIfTI datatype code {datatype}")
    dtype = np.dtype(bo + _NIFTI_DTYPES[datatype])

    offset = int(round(vox_offset))
    if offset < _NIFTI_HDR_SIZE:
        raise FormatError(f"{path}: vox_offset {vox_offset} overlaps the header")
    count = nx * ny * nz
    nbytes = count * dtype.itemsize
    if len(raw) < offset + nbytes:
        raise FormatError(f"{path}: payload is {len(raw) - offset} bytes, expected {nbytes}")

    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).astype(np.float64)
    if scl_slope != 0.0:
        data = data * float(scl_slope) + float(scl_inter)
    voxels = data.astype(np.float32).reshape((nz, ny, nx)).transpose(2, 1, 0)

    sx, sy, sz = (abs(pixdim[i]) or 1.0 for i in (1, 2, 3))
    return Volume((nx, ny, nz), (sx, sy, sz), "unknown", voxels)
