"""Single-file NIfTI-1 reader and writer (.nii / .nii.gz).

Implements the 348-byte header directly: no external imaging library.
Supported on-disk datatypes are uint8, int16, int32, float32, and float64;
only 3-D single-file images (magic ``n+1``) are handled. The voxel->world
affine comes from the sform when valid, else the qform quaternion, else a
diagonal built from pixdim.
"""

from __future__ import annotations

import gzip
from pathlib import Path

import numpy as np

from .volume import LabelVolume, ScalarVolume, Volume, as_affine


class NiftiError(IOError):
    """Malformed, unsupported, or unreadable NIfTI file."""


_HEADER_DTYPE = np.dtype([
    ("sizeof_hdr", "i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "i4"),
    ("session_error", "i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "i2", 8),
    ("intent_p1", "f4"),
    ("intent_p2", "f4"),
    ("intent_p3", "f4"),
    ("intent_code", "i2"),
    ("datatype", "i2"),
    ("bitpix", "i2"),
    ("slice_start", "i2"),
    ("pixdim", "f4", 8),
    ("vox_offset", "f4"),
    ("scl_slope", "f4"),
    ("scl_inter", "f4"),
    ("slice_end", "i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "f4"),
    ("cal_min", "f4"),
    ("slice_duration", "f4"),
    ("toffset", "f4"),
    ("glmax", "i4"),
    ("glmin", "i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "i2"),
    ("sform_code", "i2"),
    ("quatern_b", "f4"),
    ("quatern_c", "f4"),
    ("quatern_d", "f4"),
    ("qoffset_x", "f4"),
    ("qoffset_y", "f4"),
    ("qoffset_z", "f4"),
    ("srow_x", "f4", 4),
    ("srow_y", "f4", 4),
    ("srow_z", "f4", 4),
    ("intent_name", "S16"),
    ("magic", "S4"),
])
assert _HEADER_DTYPE.itemsize == 348

_CODE_TO_DTYPE = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
}
_DTYPE_TO_CODE = {v: k for k, v in _CODE_TO_DTYPE.items()}


def _read_bytes(path: Path) -> bytes:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _quaternion_affine(hdr) -> np.ndarray:
    b = float(hdr["quatern_b"])
    c = float(hdr["quatern_c"])
    d = float(hdr["quatern_d"])
    a = max(0.0, 1.0 - b * b - c * c - d * d) ** 0.5
    rot = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
    ])
    pix = np.asarray(hdr["pixdim"], dtype=np.float64)
    qfac = -1.0 if pix[0] < 0 else 1.0
    aff = np.eye(4)
    aff[:3, :3] = rot @ np.diag([pix[1], pix[2], pix[3] * qfac])
    aff[:3, 3] = (hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"])
    return aff


def _header_affine(hdr, spacing) -> np.ndarray:
    if int(hdr["sform_code"]) > 0:
        aff = np.eye(4)
        aff[0] = hdr["srow_x"]
        aff[1] = hdr["srow_y"]
        aff[2] = hdr["srow_z"]
        return aff
    if int(hdr["qform_code"]) > 0:
        return _quaternion_affine(hdr)
    aff = np.eye(4)
    aff[0, 0], aff[1, 1], aff[2, 2] = spacing
    return aff


def read_nifti(path, kind: str = "auto") -> Volume:
    """Read a 3-D NIfTI-1 volume.

    ``kind`` selects the container: "scalar" -> ScalarVolume, "label" ->
    LabelVolume, "auto" -> label for unscaled uint8 data, scalar otherwise.
    """
    if kind not in ("auto", "scalar", "label"):
        raise ValueError(f"kind must be auto/scalar/label, got {kind!r}")
    path = Path(path)
    try:
        raw = _read_bytes(path)
    except OSError as exc:
        raise NiftiError(f"{path}: cannot read ({exc})") from exc
    if len(raw) < 348:
        raise NiftiError(f"{path}: too short for a NIfTI-1 header")

    hdr = np.frombuffer(raw[:348], dtype=_HEADER_DTYPE.newbyteorder("<"))[0]
    byteorder = "<"
    if int(hdr["sizeof_hdr"]) != 348:
        hdr = np.frombuffer(raw[:348], dtype=_HEADER_DTYPE.newbyteorder(">"))[0]
        byteorder = ">"
        if int(hdr["sizeof_hdr"]) != 348:
            raise NiftiError(f"{path}: not a NIfTI-1 file (sizeof_hdr != 348)")

    magic = bytes(hdr["magic"])
    if magic not in (b"n+1\x00", b"n+1"):
        if magic.startswith(b"ni1"):
            raise NiftiError(f"{path}: detached .hdr/.img pairs are not supported")
        raise NiftiError(f"{path}: bad magic bytes {magic!r}")

    ndim = int(hdr["dim"][0])
    if ndim != 3:
        raise NiftiError(f"{path}: expected a 3-D image, header says {ndim}-D")
    shape = tuple(int(v) for v in hdr["dim"][1:4])
    if min(shape) < 1:
        raise NiftiError(f"{path}: non-positive dimensions {shape}")

    code = int(hdr["datatype"])
    if code not in _CODE_TO_DTYPE:
        raise NiftiError(f"{path}: unsupported datatype code {code}")
    dtype = _CODE_TO_DTYPE[code].newbyteorder(byteorder)

    spacing = tuple(abs(float(v)) or 1.0 for v in hdr["pixdim"][1:4])
    affine = _header_affine(hdr, spacing)

    offset = int(hdr["vox_offset"])
    count = int(np.prod(shape))
    expected = offset + count * dtype.itemsize
    if len(raw) < expected:
        raise NiftiError(f"{path}: truncated data ({len(raw)} < {expected} bytes)")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    data = data.reshape(shape, order="F")  # NIfTI stores x fastest

    slope = float(hdr["scl_slope"])
    inter = float(hdr["scl_inter"])
    scaled = slope not in (0.0, 1.0) or inter != 0.0

    if kind == "auto":
        kind = "label" if (code == 2 and not scaled) else "scalar"

    if kind == "label":
        if scaled:
            raise NiftiError(f"{path}: scl_slope/scl_inter set on a label volume")
        if not np.issubdtype(dtype, np.integer):
            raise NiftiError(f"{path}: label volume with non-integer datatype")
        if data.size and data.min() < 0:
            raise NiftiError(f"{path}: label volume contains negative values")
        native = data.astype(dtype.newbyteorder("="))  # copy; frombuffer is read-only
        return LabelVolume(native, spacing, affine)

    out_dtype = np.float64 if code == 64 else np.float32
    values = data.astype(out_dtype)
    if scaled:
        values = values * out_dtype(slope if slope != 0.0 else 1.0) + out_dtype(inter)
    return ScalarVolume(np.ascontiguousarray(values), spacing, affine)


def write_nifti(vol: Volume, path, dtype=None) -> None:
    """Write a volume as a single-file little-endian NIfTI-1 image.

    Default on-disk datatype is float32 for scalar volumes and uint8 for
    label volumes; pass ``dtype`` (e.g. np.int32 for count maps) to
    override. Integer round-trips are bit-exact; the affine is stored as
    float32 srows (sform), the format's own precision limit.
    """
    path = Path(path)
    as_affine(vol.affine)

    if dtype is None:
        dtype = np.uint8 if isinstance(vol, LabelVolume) else np.float32
    dtype = np.dtype(dtype).newbyteorder("<")
    if dtype.newbyteorder("=") not in _DTYPE_TO_CODE:
        raise NiftiError(f"unsupported on-disk datatype {dtype}")
    code = _DTYPE_TO_CODE[dtype.newbyteorder("=")]

    data = vol.data
    if np.issubdtype(dtype, np.integer) and np.issubdtype(data.dtype, np.integer):
        info = np.iinfo(dtype)
        if data.size and (data.min() < info.min or data.max() > info.max):
            raise NiftiError(
                f"values [{data.min()}, {data.max()}] do not fit in {dtype}")

    hdr = np.zeros((), dtype=_HEADER_DTYPE.newbyteorder("<"))
    hdr["sizeof_hdr"] = 348
    hdr["regular"] = b"r"
    hdr["dim"] = (3, *vol.shape, 1, 1, 1, 1)
    hdr["datatype"] = code
    hdr["bitpix"] = dtype.itemsize * 8
    hdr["pixdim"] = (1.0, *vol.spacing, 0.0, 0.0, 0.0, 0.0)
    hdr["vox_offset"] = 352
    hdr["scl_slope"] = 1.0
    hdr["xyzt_units"] = 2  # NIFTI_UNITS_MM
    hdr["descrip"] = b"lesionprior"
    hdr["sform_code"] = 1
    hdr["srow_x"] = vol.affine[0]
    hdr["srow_y"] = vol.affine[1]
    hdr["srow_z"] = vol.affine[2]
    hdr["magic"] = b"n+1"

    payload = hdr.tobytes() + b"\x00" * 4 + data.astype(dtype).tobytes(order="F")
    opener = gzip.open if path.suffix == ".gz" else open
    try:
        with opener(path, "wb") as fh:
            fh.write(payload)
    except OSError as exc:
        raise NiftiError(f"{path}: cannot write ({exc})") from exc
