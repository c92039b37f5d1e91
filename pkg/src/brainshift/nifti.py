"""Minimal single-file NIfTI-1 (``.nii``) reader/writer.

Only uncompressed files with float32 or int16 voxels are handled. Orientation
is assumed axis-aligned; rotations in the sform/qform are ignored with a
warning.
"""

from __future__ import annotations

import warnings
from pathlib import Path

import numpy as np

from .fileio import atomic_write
from .volume import MASK_CLASSES, MaskVolume, ScalarVolume, VectorField

header_dtd = [
    ("sizeof_hdr", "i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "i4"),
    ("session_error", "i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "i2", (8,)),
    ("intent_p1", "f4"),
    ("intent_p2", "f4"),
    ("intent_p3", "f4"),
    ("intent_code", "i2"),
    ("datatype", "i2"),
    ("bitpix", "i2"),
    ("slice_start", "i2"),
    ("pixdim", "f4", (8,)),
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
    ("srow_x", "f4", (4,)),
    ("srow_y", "f4", (4,)),
    ("srow_z", "f4", (4,)),
    ("intent_name", "S16"),
    ("magic", "S4"),
]
HEADER_DTYPE = np.dtype(header_dtd)
assert HEADER_DTYPE.itemsize == 348

DATATYPES = {16: np.dtype("f4"), 4: np.dtype("i2")}
DT_FLOAT32, DT_INT16 = 16, 4
NIFTI_INTENT_VECTOR = 1007
FIELD_DESCRIP = b"displacement voxel units, backward warp"

LABEL_CODES = {"brain": 1, "skull": 2, "hematoma": 3, "ventricle_left": 4, "ventricle_right": 5}


class NiftiError(ValueError):
    pass


class NiftiFormatError(NiftiError):
    """Not a single-file NIfTI-1 image (bad size field or magic)."""


class NiftiDatatypeError(NiftiError):
    """Voxel datatype other than float32 / int16."""


class NiftiTruncatedError(NiftiError):
    """File ends before the header or voxel data does."""


def _parse_header(raw: bytes) -> np.ndarray:
    if len(raw) < 348:
        raise NiftiTruncatedError(f"header needs 348 bytes, file has {len(raw)}")
    for order in ("<", ">"):
        hdr = np.frombuffer(raw[:348], dtype=HEADER_DTYPE.newbyteorder(order))[0]
        if hdr["sizeof_hdr"] == 348:
            break
    else:
        raise NiftiFormatError("sizeof_hdr is not 348")
    if hdr["magic"] != b"n+1":
        raise NiftiFormatError(f"unsupported magic {bytes(hdr['magic'])!r}; only single-file 'n+1' is read")
    return hdr


def read_raw(path) -> tuple[np.ndarray, tuple[float, float, float], np.ndarray]:
    """Return (array in [x, y, z, ...] order, spacing, header)."""
    raw = Path(path).read_bytes()
    hdr = _parse_header(raw)
    code = int(hdr["datatype"])
    if code not in DATATYPES:
        raise NiftiDatatypeError(f"datatype code {code} unsupported (float32=16, int16=4)")
    ndim = int(hdr["dim"][0])
    if not 1 <= ndim <= 7:
        raise NiftiFormatError(f"dim[0]={ndim} out of range")
    shape = tuple(int(d) for d in hdr["dim"][1 : ndim + 1])
    dtype = DATATYPES[code].newbyteorder(hdr.dtype["sizeof_hdr"].byteorder)
    offset = int(hdr["vox_offset"])
    nbytes = int(np.prod(shape)) * dtype.itemsize
    if len(raw) < offset + nbytes:
        raise NiftiTruncatedError(f"expected {nbytes} voxel bytes at offset {offset}, file has {len(raw)}")
    data = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)), offset=offset)
    data = data.reshape(shape, order="F")
    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    if code == DT_FLOAT32:
        data = data.astype(np.float32)
        if slope not in (0.0, 1.0) or inter != 0.0:
            data = data * slope + inter
    else:
        data = data.astype(np.float64)
        if slope != 0.0:
            data = data * slope + inter
    if hdr["sform_code"] > 0:
        rot = np.array([hdr["srow_x"][:3], hdr["srow_y"][:3], hdr["srow_z"][:3]], dtype=np.float64)
        if np.any(np.abs(rot - np.diag(np.diag(rot))) > 1e-6):
            warnings.warn("sform contains rotation/shear; ignored (axis-aligned grid assumed)")
    elif hdr["qform_code"] > 0 and np.any(np.abs([hdr["quatern_b"], hdr["quatern_c"], hdr["quatern_d"]]) > 1e-6):
        warnings.warn("qform contains a rotation; ignored (axis-aligned grid assumed)")
    spacing = tuple(float(abs(p)) if p != 0 else 1.0 for p in hdr["pixdim"][1:4])
    return data, spacing, hdr


def _build(data: np.ndarray, spacing, datatype: int, descrip: bytes = b"", intent: int = 0) -> bytes:
    hdr = np.zeros((), dtype=HEADER_DTYPE.newbyteorder("<"))
    hdr["sizeof_hdr"] = 348
    hdr["regular"] = b"r"
    dim = np.ones(8, dtype=np.int16)
    dim[0] = data.ndim
    dim[1 : data.ndim + 1] = data.shape
    hdr["dim"] = dim
    hdr["intent_code"] = intent
    hdr["datatype"] = datatype
    hdr["bitpix"] = DATATYPES[datatype].itemsize * 8
    pixdim = np.ones(8, dtype=np.float32)
    pixdim[1:4] = spacing
    hdr["pixdim"] = pixdim
    hdr["vox_offset"] = 352.0
    hdr["scl_slope"] = 1.0
    hdr["xyzt_units"] = 2  # mm
    hdr["descrip"] = descrip[:79]
    hdr["sform_code"] = 1
    hdr["srow_x"] = [spacing[0], 0, 0, 0]
    hdr["srow_y"] = [0, spacing[1], 0, 0]
    hdr["srow_z"] = [0, 0, spacing[2], 0]
    hdr["magic"] = b"n+1"
    body = np.asarray(data, dtype=DATATYPES[datatype].newbyteorder("<")).tobytes(order="F")
    return hdr.tobytes() + b"\x00" * 4 + body


def write_raw(path, data: np.ndarray, spacing, datatype: int = DT_FLOAT32, descrip: bytes = b"", intent: int = 0) -> None:
    if datatype not in DATATYPES:
        raise NiftiDatatypeError(f"cannot write datatype code {datatype}")
    atomic_write(path, _build(np.asarray(data), spacing, datatype, descrip, intent))


def read_nifti(path) -> ScalarVolume:
    data, spacing, _ = read_raw(path)
    if data.ndim != 3:
        raise NiftiFormatError(f"expected a 3-D volume, got shape {data.shape}")
    return ScalarVolume(data.astype(np.float64), spacing)


def write_nifti(vol: ScalarVolume, path, datatype: int = DT_FLOAT32) -> None:
    data = vol.data
    if datatype == DT_INT16:
        data = np.rint(data)
    write_raw(path, data, vol.spacing, datatype)


def read_labels(path) -> MaskVolume:
    """Integer label map -> one-hot masks. Ventricles also count as brain."""
    data, spacing, _ = read_raw(path)
    if data.ndim != 3:
        raise NiftiFormatError(f"expected a 3-D label map, got shape {data.shape}")
    labels = np.rint(data).astype(np.int64)
    chans = {name: (labels == code).astype(np.float64) for name, code in LABEL_CODES.items()}
    chans["brain"] = np.isin(labels, [1, 4, 5]).astype(np.float64)
    return MaskVolume.from_channels(chans, spacing)


def write_labels(masks: MaskVolume, path) -> None:
    """Binarize at 0.5 and encode; later classes in the code table win ties."""
    labels = np.zeros(masks.dims, dtype=np.int16)
    for name in ("brain", "skull", "hematoma", "ventricle_left", "ventricle_right"):
        labels[masks.channel(name) >= 0.5] = LABEL_CODES[name]
    write_raw(path, labels, masks.spacing, DT_INT16)


def read_field(path) -> VectorField:
    data, spacing, _ = read_raw(path)
    if data.ndim != 4 or data.shape[3] != 3:
        raise NiftiFormatError(f"expected (nx, ny, nz, 3) field, got shape {data.shape}")
    return VectorField(np.moveaxis(data.astype(np.float64), 3, 0), spacing)


def write_field(fld: VectorField, path) -> None:
    write_raw(path, np.moveaxis(fld.data, 0, 3), fld.spacing, DT_FLOAT32,
              descrip=FIELD_DESCRIP, intent=NIFTI_INTENT_VECTOR)


__all__ = [
    "NiftiError", "NiftiFormatError", "NiftiDatatypeError", "NiftiTruncatedError",
    "read_nifti", "write_nifti", "read_labels", "write_labels", "read_field", "write_field",
    "read_raw", "write_raw", "LABEL_CODES", "MASK_CLASSES",
]
