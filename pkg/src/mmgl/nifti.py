"""Minimal NIfTI-1 reader/writer for .nii and .nii.gz files.

Covers the single-file (.nii) variant only: a 348-byte header, a 4-byte
extension flag, and the raw voxel block at ``vox_offset``. Enough to
round-trip the volumes this package produces and to ingest plain
scanner exports; orientation metadata beyond the voxel grid is ignored.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"

# NIfTI-1 datatype code -> numpy dtype
_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


class NiftiError(Exception):
    """Raised when a file cannot be parsed as NIfTI-1."""


def _open(path, mode):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, mode)
    return open(path, mode)


def read_nifti(path) -> np.ndarray:
    """Read a NIfTI-1 volume as a (depth, height, width) array.

    Applies scl_slope/scl_inter rescaling when present. Raises
    FileNotFoundError for a missing path and NiftiError for anything
    that is not a parseable NIfTI-1 file.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    try:
        with _open(path, "rb") as fh:
            raw = fh.read()
    except (OSError, EOFError) as exc:
        raise NiftiError(f"could not read {path}: {exc}") from exc
    if len(raw) < HEADER_SIZE:
        raise NiftiError(f"{path}: truncated header ({len(raw)} bytes)")

    order = "<"
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        (sizeof_hdr,) = struct.unpack_from(">i", raw, 0)
        if sizeof_hdr != HEADER_SIZE:
            raise NiftiError(f"{path}: bad sizeof_hdr, not a NIfTI-1 file")
        order = ">"

    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise NiftiError(f"{path}: bad magic {magic!r}")
    if magic == b"ni1\x00":
        raise NiftiError(f"{path}: two-file (.hdr/.img) NIfTI is not supported")

    dim = struct.unpack_from(order + "8h", raw, 40)
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise NiftiError(f"{path}: invalid dim[0]={ndim}")
    shape_xyz = [max(1, d) for d in dim[1 : 1 + ndim]]

    (datatype,) = struct.unpack_from(order + "h", raw, 70)
    if datatype not in _DTYPES:
        raise NiftiError(f"{path}: unsupported datatype code {datatype}")
    dtype = np.dtype(_DTYPES[datatype]).newbyteorder(order)

    (vox_offset,) = struct.unpack_from(order + "f", raw, 108)
    offset = int(vox_offset) if vox_offset >= HEADER_SIZE else VOX_OFFSET
    scl_slope, scl_inter = struct.unpack_from(order + "2f", raw, 112)

    count = int(np.prod(shape_xyz))
    needed = offset + count * dtype.itemsize
    if len(raw) < needed:
        raise NiftiError(f"{path}: data block truncated ({len(raw)} < {needed})")

    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    # dim[1] varies fastest on disk; reversing gives C-order (…, h, w)
    arr = flat.reshape(shape_xyz[::-1])
    while arr.ndim > 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 3:
        raise NiftiError(f"{path}: expected a 3-D volume, got shape {arr.shape}")

    arr = np.asarray(arr)
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        arr = arr.astype(np.float32) * slope + scl_inter
    return np.ascontiguousarray(arr)


def write_nifti(path, volume: np.ndarray) -> None:
    """Write a (depth, height, width) array as a single-file NIfTI-1."""
    volume = np.ascontiguousarray(volume)
    if volume.ndim != 3:
        raise ValueError(f"expected 3-D array, got shape {volume.shape}")
    dtype = volume.dtype
    if dtype == np.bool_ or dtype == np.int64:
        volume = volume.astype(np.uint8 if volume.max(initial=0) < 256 else np.int32)
        dtype = volume.dtype
    if np.dtype(dtype) not in _CODES:
        volume = volume.astype(np.float32)
        dtype = volume.dtype

    header = bytearray(HEADER_SIZE)
    struct.pack_into("<i", header, 0, HEADER_SIZE)
    d, h, w = volume.shape
    struct.pack_into("<8h", header, 40, 3, w, h, d, 1, 1, 1, 1)
    struct.pack_into("<h", header, 70, _CODES[np.dtype(dtype)])
    struct.pack_into("<h", header, 72, dtype.itemsize * 8)  # bitpix
    struct.pack_into("<8f", header, 76, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", header, 108, float(VOX_OFFSET))
    struct.pack_into("<2f", header, 112, 1.0, 0.0)  # scl_slope, scl_inter
    header[344:348] = MAGIC

    with _open(path, "wb") as fh:
        fh.write(bytes(header))
        fh.write(b"\x00\x00\x00\x00")  # no extensions
        fh.write(volume.astype(dtype, copy=False).tobytes(order="C"))
