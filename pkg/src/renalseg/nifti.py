"""Minimal NIfTI-1 reader/writer.

Covers the subset used for CT segmentation work: 3D volumes, datatypes
uint8/int16/int32/float32/float64, little- or big-endian headers on read,
little-endian single-file (``n+1``) output, optional gzip. Voxel payloads
are x-fastest, matching the package-wide array convention.
"""
from __future__ import annotations

import gzip
import io
import math

import numpy as np

from .errors import DataQualityError, DimensionalityError, NiftiParseError, UnsupportedFormatError
from .volume import NUM_CLASSES, LabelVolume, ScalarVolume, VolumeHeader

HEADER_SIZE = 348
VOX_OFFSET = 352  # header + 4-byte extension flag
MAGIC_OFFSET = 344

_HEADER_FIELDS = [
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

# code -> numpy dtype char; deliberately small (CT practice)
_DTYPES = {2: "u1", 4: "i2", 8: "i4", 16: "f4", 64: "f8"}
_BITPIX = {2: 8, 4: 16, 8: 32, 16: 32, 64: 64}
_INT_CODES = (2, 4, 8)

_VALID_MAGIC = (b"n+1\x00", b"ni1\x00")


def _header_dtype(byteorder: str) -> np.dtype:
    return np.dtype(_HEADER_FIELDS).newbyteorder(byteorder)


def _maybe_gunzip(data: bytes) -> bytes:
    if data[:2] == b"\x1f\x8b":
        return gzip.decompress(data)
    return data


def _quaternion_to_matrix(b: float, c: float, d: float) -> np.ndarray:
    w2 = 1.0 - (b * b + c * c + d * d)
    a = math.sqrt(w2) if w2 > 0 else 0.0
    return np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
    ])


def _geometry_from_header(hdr, xform_priority: str):
    """Extract (spacing, origin, direction) honoring qform/sform priority."""
    pixdim = np.asarray(hdr["pixdim"], dtype=np.float64)
    sform_code = int(hdr["sform_code"])
    qform_code = int(hdr["qform_code"])
    use_sform = sform_code > 0 and (xform_priority == "sform" or qform_code <= 0)
    use_qform = qform_code > 0 and not use_sform

    if use_sform:
        affine = np.vstack([hdr["srow_x"], hdr["srow_y"], hdr["srow_z"]]).astype(np.float64)
        rotation = affine[:, :3]
        spacing = np.sqrt((rotation ** 2).sum(axis=0))
        if np.any(spacing <= 0):
            raise NiftiParseError(f"degenerate sform columns (spacing {spacing})")
        direction = rotation / spacing
        origin = affine[:, 3]
    elif use_qform:
        spacing = pixdim[1:4].copy()
        spacing[spacing <= 0] = 1.0
        direction = _quaternion_to_matrix(float(hdr["quatern_b"]), float(hdr["quatern_c"]),
                                          float(hdr["quatern_d"]))
        qfac = float(pixdim[0])
        if qfac == 0:
            qfac = 1.0
        direction = direction.copy()
        direction[:, 2] *= qfac
        origin = np.array([hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"]], dtype=np.float64)
    else:
        spacing = pixdim[1:4].copy()
        spacing[spacing <= 0] = 1.0
        direction = np.eye(3)
        origin = np.zeros(3)
    return tuple(spacing), tuple(origin), direction


def parse_nifti(data: bytes, *, as_labels: bool = False,
                xform_priority: str = "sform") -> ScalarVolume | LabelVolume:
    """Parse a NIfTI-1 byte stream (optionally gzip-compressed).

    ``as_labels`` loads an integer-typed file whose scaled values lie in
    {0..4} as a :class:`LabelVolume`; otherwise a :class:`ScalarVolume` with
    slope/intercept applied is returned.
    """
    if xform_priority not in ("sform", "qform"):
        raise ValueError(f"xform_priority must be 'sform' or 'qform', got {xform_priority!r}")
    data = _maybe_gunzip(bytes(data))
    if len(data) < HEADER_SIZE:
        raise NiftiParseError(f"file too short for a NIfTI-1 header ({len(data)} < {HEADER_SIZE} bytes)")
    magic = data[MAGIC_OFFSET:MAGIC_OFFSET + 4]
    if magic not in _VALID_MAGIC:
        raise NiftiParseError(f"bad magic {magic!r} at byte offset {MAGIC_OFFSET} "
                              f"(expected 'n+1\\0' or 'ni1\\0')")

    byteorder = "<"
    hdr = np.frombuffer(data[:HEADER_SIZE], dtype=_header_dtype("<"))[0]
    if int(hdr["sizeof_hdr"]) != HEADER_SIZE:
        byteorder = ">"
        hdr = np.frombuffer(data[:HEADER_SIZE], dtype=_header_dtype(">"))[0]
        if int(hdr["sizeof_hdr"]) != HEADER_SIZE:
            raise NiftiParseError("sizeof_hdr is not 348 under either byte order")

    ndim = int(hdr["dim"][0])
    if ndim != 3:
        raise DimensionalityError(f"only 3D volumes supported, file declares dim[0] = {ndim}")
    shape = tuple(int(v) for v in hdr["dim"][1:4])
    if any(n < 1 for n in shape):
        raise NiftiParseError(f"non-positive dimension in {shape}")

    code = int(hdr["datatype"])
    if code not in _DTYPES:
        raise UnsupportedFormatError(f"unsupported NIfTI datatype code {code} "
                                     f"(supported: {sorted(_DTYPES)})")
    voxel_dtype = np.dtype(_DTYPES[code]).newbyteorder(byteorder)

    offset = int(hdr["vox_offset"])
    if offset < HEADER_SIZE:
        offset = VOX_OFFSET if magic == _VALID_MAGIC[0] else HEADER_SIZE
    nvox = int(np.prod(shape))
    need = nvox * voxel_dtype.itemsize
    payload = data[offset:offset + need]
    if len(payload) < need:
        raise NiftiParseError(f"truncated voxel payload: need {need} bytes at offset {offset}, "
                              f"have {len(payload)}")
    raw = np.frombuffer(payload, dtype=voxel_dtype).reshape(shape, order="F")

    slope = float(hdr["scl_slope"])
    inter = float(hdr["scl_inter"])
    if slope == 0 or not math.isfinite(slope):
        slope = 1.0
    if not math.isfinite(inter):
        inter = 0.0

    spacing, origin, direction = _geometry_from_header(hdr, xform_priority)
    header = VolumeHeader(shape=shape, spacing=spacing, origin=origin, direction=direction,
                          intensity_scale=slope, intensity_offset=inter)

    if as_labels:
        if code not in _INT_CODES:
            raise UnsupportedFormatError(f"label volumes must use an integer datatype, got code {code}")
        scaled = raw.astype(np.float64) * slope + inter
        rounded = np.rint(scaled)
        if not np.array_equal(rounded, scaled):
            raise DataQualityError("scaled label values are not integral")
        if scaled.size and (rounded.min() < 0 or rounded.max() >= NUM_CLASSES):
            bad = int(np.count_nonzero((rounded < 0) | (rounded >= NUM_CLASSES)))
            raise DataQualityError(f"{bad} voxel(s) outside label codes 0..{NUM_CLASSES - 1}")
        return LabelVolume(header=header, labels=rounded.astype(np.uint8))

    values = raw.astype(np.float32)
    if slope != 1.0:
        values = values * np.float32(slope)
    if inter != 0.0:
        values = values + np.float32(inter)
    bad = int(values.size - np.count_nonzero(np.isfinite(values)))
    if bad:
        raise DataQualityError(f"{bad} non-finite voxel(s) in file")
    return ScalarVolume(header=header, voxels=values)


def write_nifti(volume: ScalarVolume | LabelVolume) -> bytes:
    """Serialize a volume as a little-endian single-file NIfTI-1 stream.

    Voxels are stored post-scaling (float32 for scalars, uint8 for labels)
    with scl_slope 1 / scl_inter 0, so ``parse_nifti(write_nifti(v))`` is an
    identity on voxel values.
    """
    if isinstance(volume, LabelVolume):
        arr = volume.labels
        code = 2
    elif isinstance(volume, ScalarVolume):
        arr = volume.voxels
        code = 16
    else:
        raise TypeError(f"cannot serialize {type(volume).__name__}")

    h = volume.header
    hdr = np.zeros((), dtype=_header_dtype("<"))
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["regular"] = b"r"
    dim = np.ones(8, dtype=np.int16)
    dim[0] = 3
    dim[1:4] = h.shape
    hdr["dim"] = dim
    hdr["datatype"] = code
    hdr["bitpix"] = _BITPIX[code]
    pixdim = np.zeros(8, dtype=np.float32)
    pixdim[0] = 1.0
    pixdim[1:4] = h.spacing
    hdr["pixdim"] = pixdim
    hdr["vox_offset"] = VOX_OFFSET
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["xyzt_units"] = 2  # mm
    hdr["descrip"] = b"renalseg"
    hdr["sform_code"] = 1
    hdr["qform_code"] = 0
    affine = h.direction * np.asarray(h.spacing)[None, :]
    for name, row, off in (("srow_x", 0, 0), ("srow_y", 1, 1), ("srow_z", 2, 2)):
        hdr[name] = np.array([affine[row, 0], affine[row, 1], affine[row, 2], h.origin[off]],
                             dtype=np.float32)
    hdr["magic"] = b"n+1\x00"

    out = io.BytesIO()
    out.write(hdr.tobytes())
    out.write(b"\x00\x00\x00\x00")  # no extensions
    out.write(np.asarray(arr).tobytes(order="F"))
    return out.getvalue()


def gzip_bytes(data: bytes) -> bytes:
    """Deterministic gzip (mtime pinned to 0 so outputs are bit-stable)."""
    buf = io.BytesIO()
    with gzip.GzipFile(fileobj=buf, mode="wb", mtime=0) as gz:
        gz.write(data)
    return buf.getvalue()
