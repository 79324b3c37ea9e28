"""NIfTI-1 single-file reading/writing and nearest-neighbour label resampling.

Only ``.nii`` / ``.nii.gz`` with uint8, int16, int32, float32 or float64
voxels are supported. 4-D files are accepted when the fourth axis has length
one. Extensions are skipped, never interpreted.
"""
from __future__ import annotations

import csv
import gzip
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HEADER_SIZE = 348
DATATYPES = {
    2: np.dtype("u1"),
    4: np.dtype("i2"),
    8: np.dtype("i4"),
    16: np.dtype("f4"),
    64: np.dtype("f8"),
}
DATATYPE_CODES = {dt.name: code for code, dt in DATATYPES.items()}


class NiftiError(ValueError):
    """Parse or write failure. ``kind`` classifies the problem."""

    def __init__(self, kind, message):
        super().__init__(message)
        self.kind = kind


class SingularAffineError(ValueError):
    pass


@dataclass
class NiftiHeader:
    dims: tuple
    datatype_code: int
    voxel_sizes: tuple
    affine: np.ndarray
    scl_slope: float = 1.0
    scl_inter: float = 0.0
    vox_offset: int = 352
    affine_source: str = "sform"
    endian: str = "<"
    descrip: str = ""

    @property
    def dtype(self):
        return DATATYPES[self.datatype_code]

    @property
    def shape(self):
        return tuple(self.dims[:3])


@dataclass
class VolumeGrid:
    data: np.ndarray
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        self.affine = np.asarray(self.affine, dtype=np.float64)
        if self.affine.shape != (4, 4):
            raise ValueError("affine must be 4x4")

    @property
    def shape(self):
        return self.data.shape


@dataclass
class AtlasParcellation:
    labels: np.ndarray
    affine: np.ndarray
    roi_table: list  # [(label_id, name)], order defines the ROI index

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        ids = {lid for lid, _ in self.roi_table}
        if len(ids) != len(self.roi_table):
            raise ValueError("duplicate label ids in ROI table")
        present = set(np.unique(self.labels).tolist()) - {0}
        missing = present - ids
        if missing:
            raise ValueError(f"labels {sorted(missing)[:5]} are not listed in the ROI table")

    @property
    def n_rois(self):
        return len(self.roi_table)

    @property
    def label_ids(self):
        return [lid for lid, _ in self.roi_table]

    @property
    def names(self):
        return [name for _, name in self.roi_table]


def make_header(shape, affine=None, datatype="float32", scl_slope=1.0, scl_inter=0.0):
    """Header for a fresh 3-D volume with the sform set from ``affine``."""
    affine = np.eye(4) if affine is None else np.asarray(affine, dtype=np.float64)
    code = DATATYPE_CODES[np.dtype(datatype).name]
    zooms = tuple(float(z) for z in np.linalg.norm(affine[:3, :3], axis=0))
    return NiftiHeader(
        dims=tuple(int(s) for s in shape),
        datatype_code=code,
        voxel_sizes=zooms,
        affine=affine,
        scl_slope=scl_slope,
        scl_inter=scl_inter,
    )


def _quaternion_affine(b, c, d, qx, qy, qz, pixdim):
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(a2) if a2 > 1e-7 else 0.0
    R = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ]
    )
    qfac = -1.0 if pixdim[0] < 0 else 1.0
    zooms = np.array([pixdim[1], pixdim[2], pixdim[3] * qfac])
    zooms = np.where(zooms == 0, 1.0, zooms)
    aff = np.eye(4)
    aff[:3, :3] = R * zooms
    aff[:3, 3] = (qx, qy, qz)
    return aff


def _decode_header(raw):
    if len(raw) < HEADER_SIZE:
        raise NiftiError("truncated", f"header needs {HEADER_SIZE} bytes, got {len(raw)}")
    for endian in "<>":
        if struct.unpack(endian + "i", raw[:4])[0] == HEADER_SIZE:
            break
    else:
        if struct.unpack("<i", raw[:4])[0] == 540 or struct.unpack(">i", raw[:4])[0] == 540:
            raise NiftiError("unsupported_format", "NIfTI-2 files are not supported")
        raise NiftiError("bad_header", "sizeof_hdr is not 348 in either byte order")
    magic = raw[344:348]
    if magic == b"ni1\x00":
        raise NiftiError("unsupported_format", "separate .hdr/.img pairs are not supported")
    if magic != b"n+1\x00":
        raise NiftiError("bad_magic", f"bad magic {magic!r}")

    def get(fmt, off):
        return struct.unpack_from(endian + fmt, raw, off)

    dim = get("8h", 40)
    ndim = dim[0]
    if ndim not in (3, 4):
        raise NiftiError("bad_dims", f"dim[0]={ndim}; only 3-D volumes are supported")
    if ndim == 4 and dim[4] != 1:
        raise NiftiError("bad_dims", f"4-D volume with {dim[4]} frames; expected a single frame")
    if min(dim[1:4]) < 1:
        raise NiftiError("bad_dims", f"non-positive spatial dimension in {dim[1:4]}")
    datatype = get("h", 70)[0]
    if datatype not in DATATYPES:
        raise NiftiError("unsupported_datatype", f"datatype code {datatype} is not supported")
    pixdim = get("8f", 76)
    vox_offset = get("f", 108)[0]
    slope, inter = get("2f", 112)
    qform_code, sform_code = get("2h", 252)
    quat = get("6f", 256)
    srows = np.array(get("12f", 280), dtype=np.float64).reshape(3, 4)
    descrip = raw[148:228].split(b"\x00", 1)[0].decode("latin-1")

    if not np.isfinite(vox_offset) or vox_offset < HEADER_SIZE or vox_offset != int(vox_offset):
        raise NiftiError("bad_header", f"invalid vox_offset {vox_offset}")
    if not np.all(np.isfinite(pixdim)):
        raise NiftiError("bad_header", "non-finite pixdim")

    affine = None
    source = "pixdim"
    if sform_code > 0:
        aff = np.eye(4)
        aff[:3] = srows
        if np.all(np.isfinite(aff)) and abs(np.linalg.det(aff[:3, :3])) > 1e-12:
            affine, source = aff, "sform"
    if affine is None and qform_code > 0 and np.all(np.isfinite(quat)):
        aff = _quaternion_affine(*quat, pixdim)
        if abs(np.linalg.det(aff[:3, :3])) > 1e-12:
            affine, source = aff, "qform"
    if affine is None:
        zooms = [p if p != 0 else 1.0 for p in pixdim[1:4]]
        affine = np.diag(list(np.abs(zooms)) + [1.0])
    if not np.all(np.isfinite(affine)):
        raise NiftiError("bad_header", f"non-finite {source} affine")

    if slope == 0 or not np.isfinite(slope) or not np.isfinite(inter):
        slope, inter = 1.0, 0.0
    return NiftiHeader(
        dims=tuple(int(d) for d in dim[1 : ndim + 1]),
        datatype_code=int(datatype),
        voxel_sizes=tuple(float(p) for p in pixdim[1:4]),
        affine=affine,
        scl_slope=float(slope),
        scl_inter=float(inter),
        vox_offset=int(vox_offset),
        affine_source=source,
        endian=endian,
        descrip=descrip,
    )


def parse_nifti(raw):
    """Decode a ``.nii`` payload (optionally gzip-wrapped) into (header, volume)."""
    raw = bytes(raw)
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError, zlib.error) as exc:
            raise NiftiError("corrupt_gzip", f"gzip stream is damaged: {exc}") from None
    header = _decode_header(raw)
    nx, ny, nz = header.shape
    dtype = header.dtype.newbyteorder(header.endian)
    nbytes = nx * ny * nz * dtype.itemsize
    end = header.vox_offset + nbytes
    if len(raw) < end:
        raise NiftiError("truncated", f"voxel data needs {end} bytes, file has {len(raw)}")
    data = np.frombuffer(raw, dtype=dtype, count=nx * ny * nz, offset=header.vox_offset)
    data = data.reshape((nx, ny, nz), order="F").astype(np.float64)
    if header.scl_slope != 1.0 or header.scl_inter != 0.0:
        with np.errstate(over="ignore", invalid="ignore"):
            data = data * header.scl_slope + header.scl_inter
    if not np.all(np.isfinite(data)):
        raise NiftiError("non_finite", "voxel values are not all finite after scaling")
    return header, VolumeGrid(np.ascontiguousarray(data), header.affine.copy())


def write_nifti(header, volume, compress=False):
    """Encode ``volume`` with ``header``'s datatype and scaling (little-endian)."""
    data = np.asarray(volume.data)
    if tuple(data.shape) != tuple(header.shape) or any(d != 1 for d in header.dims[3:]):
        raise NiftiError("shape_mismatch", f"header dims {header.dims} vs data shape {data.shape}")
    if header.datatype_code not in DATATYPES:
        raise NiftiError("unsupported_datatype", f"datatype code {header.datatype_code}")
    dtype = header.dtype.newbyteorder("<")
    slope = header.scl_slope if header.scl_slope not in (0.0,) else 1.0
    stored = data.astype(np.float64)
    if slope != 1.0 or header.scl_inter != 0.0:
        stored = (stored - header.scl_inter) / slope
    if dtype.kind in "iu":
        info = np.iinfo(dtype)
        stored = np.clip(np.rint(stored), info.min, info.max)
    affine = np.asarray(volume.affine, dtype=np.float64)
    zooms = np.linalg.norm(affine[:3, :3], axis=0)

    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *header.shape, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, header.datatype_code)
    struct.pack_into("<h", hdr, 72, dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *zooms, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<2f", hdr, 112, slope, header.scl_inter)
    struct.pack_into("<B", hdr, 123, 2)  # xyzt_units: mm
    desc = header.descrip.encode("latin-1")[:79]
    hdr[148 : 148 + len(desc)] = desc
    struct.pack_into("<2h", hdr, 252, 0, 2)  # qform unset, sform aligned
    struct.pack_into("<12f", hdr, 280, *affine[:3].ravel())
    hdr[344:348] = b"n+1\x00"
    payload = bytes(hdr) + b"\x00" * 4 + stored.astype(dtype).tobytes(order="F")
    if compress:
        # mtime pinned so identical volumes produce identical files
        return gzip.compress(payload, mtime=0)
    return payload


def load_nifti(path):
    path = Path(path)
    try:
        return parse_nifti(path.read_bytes())
    except NiftiError as exc:
        raise NiftiError(exc.kind, f"{path}: {exc}") from None


def save_nifti(path, header, volume):
    path = Path(path)
    path.write_bytes(write_nifti(header, volume, compress=path.suffix == ".gz"))


def round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def resample_labels_nn(atlas, target):
    """Nearest-neighbour resampling of ``atlas`` labels onto ``target``'s grid.

    Each target voxel centre is mapped to world space and back into atlas
    voxel space; indices round half away from zero and out-of-bounds voxels
    get label 0.
    """
    src_aff = np.asarray(atlas.affine, dtype=np.float64)
    if abs(np.linalg.det(src_aff)) < 1e-12 or abs(np.linalg.det(target.affine)) < 1e-12:
        raise SingularAffineError("atlas and target affines must be invertible")
    mapping = np.linalg.solve(src_aff, np.asarray(target.affine, dtype=np.float64))
    shape = target.shape[:3]
    ijk = np.indices(shape, dtype=np.float64).reshape(3, -1)
    src = mapping[:3, :3] @ ijk + mapping[:3, 3:4]
    idx = round_half_away(src).astype(np.int64)
    src_shape = np.array(atlas.labels.shape)[:, None]
    inside = np.all((idx >= 0) & (idx < src_shape), axis=0)
    out = np.zeros(ijk.shape[1], dtype=np.int64)
    out[inside] = atlas.labels[idx[0, inside], idx[1, inside], idx[2, inside]]
    return AtlasParcellation(out.reshape(shape), np.asarray(target.affine).copy(), list(atlas.roi_table))


def read_roi_table(path, expected=None):
    """Read ``label_id<TAB>name`` rows; a non-numeric first line is taken as a header."""
    rows = []
    with open(path, newline="") as fh:
        for i, rec in enumerate(csv.reader(fh, delimiter="\t")):
            if not rec or not rec[0].strip() or rec[0].startswith("#"):
                continue
            if len(rec) < 2:
                raise ValueError(f"{path}:{i + 1}: expected label_id<TAB>name")
            try:
                lid = int(rec[0])
            except ValueError:
                if rows:
                    raise ValueError(f"{path}:{i + 1}: label id {rec[0]!r} is not an integer") from None
                continue
            rows.append((lid, rec[1].strip()))
    if expected is not None and len(rows) != expected:
        raise ValueError(f"{path}: expected {expected} ROI rows, found {len(rows)}")
    return rows


def write_roi_table(path, roi_table):
    with open(path, "w", newline="") as fh:
        fh.write("label_id\tname\n")
        for lid, name in roi_table:
            fh.write(f"{lid}\t{name}\n")


def load_atlas(nifti_path, roi_table_path, expected=None):
    _, vol = load_nifti(nifti_path)
    labels = np.rint(vol.data).astype(np.int64)
    return AtlasParcellation(labels, vol.affine, read_roi_table(roi_table_path, expected))
