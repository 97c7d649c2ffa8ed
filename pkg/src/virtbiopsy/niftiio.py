"""Minimal NIfTI-1 reader/writer for single-file .nii / .nii.gz volumes.

Supports the subset of the format this pipeline produces: 3D scalar grids
stored as uint8, int16, int32, float32 or float64, with voxel spacing in
pixdim and the translation part of the affine in srow_{x,y,z} / qoffset.
Data are returned in (x, y, z) index order, matching the package's
canonical axis convention.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

HEADER_SIZE = 348
MAGIC = b"n+1\x00"

# NIfTI datatype codes
_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


def _open(path, mode):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, mode)
    return open(path, mode)


def save_nifti(path, data: np.ndarray, spacing, origin=(0.0, 0.0, 0.0)) -> None:
    """Write a 3D array as a NIfTI-1 single file (.nii or .nii.gz)."""
    data = np.asarray(data)
    if data.ndim != 3:
        raise ValueError(f"expected a 3D array, got ndim={data.ndim}")
    dt = np.dtype(data.dtype)
    if dt not in _CODES:
        if np.issubdtype(dt, np.integer):
            data, dt = data.astype(np.int32), np.dtype(np.int32)
        else:
            data, dt = data.astype(np.float32), np.dtype(np.float32)
    sx, sy, sz = (float(s) for s in spacing)
    ox, oy, oz = (float(o) for o in origin)

    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)  # sizeof_hdr
    struct.pack_into("<8h", hdr, 40, 3, *data.shape, 1, 1, 1, 1)  # dim
    struct.pack_into("<h", hdr, 70, _CODES[dt])  # datatype
    struct.pack_into("<h", hdr, 72, dt.itemsize * 8)  # bitpix
    struct.pack_into("<8f", hdr, 76, 1.0, sx, sy, sz, 0, 0, 0, 0)  # pixdim
    struct.pack_into("<f", hdr, 108, 352.0)  # vox_offset
    struct.pack_into("<f", hdr, 112, 1.0)  # scl_slope
    struct.pack_into("<h", hdr, 254, 1)  # sform_code
    struct.pack_into("<4f", hdr, 280, sx, 0, 0, ox)  # srow_x
    struct.pack_into("<4f", hdr, 296, 0, sy, 0, oy)  # srow_y
    struct.pack_into("<4f", hdr, 312, 0, 0, sz, oz)  # srow_z
    hdr[344:348] = MAGIC

    payload = bytes(hdr) + b"\x00" * 4 + np.asfortranarray(data).tobytes(order="F")
    path = Path(path)
    if path.suffix == ".gz":
        # fixed mtime keeps identical volumes byte-identical on disk
        path.write_bytes(gzip.compress(payload, mtime=0))
    else:
        path.write_bytes(payload)


def load_nifti(path):
    """Read a NIfTI-1 single file. Returns (data, spacing, origin)."""
    with _open(path, "rb") as f:
        raw = f.read()
    if len(raw) < HEADER_SIZE + 4:
        raise ValueError(f"{path}: truncated NIfTI file")
    if raw[344:348] != MAGIC:
        raise ValueError(f"{path}: not a single-file NIfTI-1 (bad magic)")
    dim = struct.unpack_from("<8h", raw, 40)
    ndim = dim[0]
    if ndim < 3 or any(d != 1 for d in dim[4 : ndim + 1]):
        raise ValueError(f"{path}: only 3D volumes are supported (dim={dim})")
    shape = dim[1:4]
    dtcode = struct.unpack_from("<h", raw, 70)[0]
    if dtcode not in _DTYPES:
        raise ValueError(f"{path}: unsupported datatype code {dtcode}")
    pixdim = struct.unpack_from("<8f", raw, 76)
    spacing = tuple(float(p) for p in pixdim[1:4])
    vox_offset = int(struct.unpack_from("<f", raw, 108)[0])
    srow_x = struct.unpack_from("<4f", raw, 280)
    srow_y = struct.unpack_from("<4f", raw, 296)
    srow_z = struct.unpack_from("<4f", raw, 312)
    origin = (float(srow_x[3]), float(srow_y[3]), float(srow_z[3]))
    dtype = np.dtype(_DTYPES[dtcode])
    count = shape[0] * shape[1] * shape[2]
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=vox_offset)
    data = data.reshape(shape, order="F").copy()
    return data, spacing, origin
