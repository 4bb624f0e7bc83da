"""NIfTI-1 volume parsing, writing, and RAS conformation.

Only single-file NIfTI-1 (``.nii`` / ``.nii.gz``) is supported.  NIfTI-2 and
header/image pairs are rejected with a clear error.  The in-memory layout is
fixed: ``data[i, j, k]`` with the first index fastest-varying, matching the
on-disk order, so downstream geometry never branches on layout.

Affine priority follows the de-facto standard readers: srow fields when
``sform_code > 0``, else the quaternion fields when ``qform_code > 0``, else a
diagonal built from pixdim.
"""
from __future__ import annotations

import gzip
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CapacityError,
    ConfigError,
    FormatError,
    GeometryError,
    TruncatedFileError,
    UnsupportedDatatypeError,
)

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC_SINGLE = b"n+1\x00"
MAGIC_PAIR = b"ni1\x00"
GZIP_MAGIC = b"\x1f\x8b"

# (name, format, shape) triples for the 348-byte NIfTI-1 header.
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

# NIfTI datatype code -> numpy dtype (scalar types only).
_DTYPE_BY_CODE = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
    1024: np.int64,
    1280: np.uint64,
}
_CODE_BY_DTYPE = {np.dtype(t): code for code, t in _DTYPE_BY_CODE.items()}

_POS_LETTERS = "RAS"
_NEG_LETTERS = "LPI"


def _header_dtype(byteorder: str) -> np.dtype:
    return np.dtype(_HEADER_FIELDS).newbyteorder(byteorder)


@dataclass(frozen=True)
class VolumeHeader:
    """Decoded geometry of a 3D volume: extents, spacing, voxel-to-world map."""

    dims: tuple[int, int, int]
    pixdim: tuple[float, float, float]
    affine: np.ndarray
    datatype_code: int = 64

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(d) < 1 for d in self.dims):
            raise FormatError(f"dims must be three positive integers, got {self.dims}")
        if len(self.pixdim) != 3 or any(not (s > 0) for s in self.pixdim):
            raise FormatError(f"pixdim must be three positive reals, got {self.pixdim}")
        aff = np.asarray(self.affine, dtype=np.float64)
        if aff.shape != (4, 4):
            raise FormatError(f"affine must be 4x4, got shape {aff.shape}")
        if abs(np.linalg.det(aff[:3, :3])) < 1e-12:
            raise GeometryError("affine upper-left 3x3 block is singular")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "pixdim", tuple(float(s) for s in self.pixdim))
        object.__setattr__(self, "affine", aff)

    @property
    def orientation(self) -> str:
        """Three-letter axis code derived from the affine (target is 'RAS')."""
        return orientation_code(self.affine)

    def __eq__(self, other) -> bool:
        if not isinstance(other, VolumeHeader):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.pixdim == other.pixdim
            and np.array_equal(self.affine, other.affine)
        )


@dataclass
class Volume3D:
    """Dense 3D scalar grid with its header.

    ``data[i, j, k]`` indexes the axes in on-disk order (first axis
    fastest-varying).  Instances are treated as immutable after construction
    and are safe to share read-only across workers.
    """

    header: VolumeHeader
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.shape != self.header.dims:
            raise FormatError(
                f"data shape {arr.shape} does not match header dims {self.header.dims}"
            )
        if arr.dtype.kind == "f" and not np.isfinite(arr).all():
            raise FormatError("volume contains NaN or Inf elements")
        self.data = arr

    @classmethod
    def from_array(cls, data, pixdim=(1.0, 1.0, 1.0), affine=None) -> "Volume3D":
        data = np.asarray(data)
        if affine is None:
            affine = np.diag(list(pixdim) + [1.0])
        code = _CODE_BY_DTYPE.get(data.dtype, 64)
        header = VolumeHeader(
            dims=tuple(data.shape), pixdim=tuple(pixdim), affine=affine, datatype_code=code
        )
        return cls(header=header, data=data)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Volume3D):
            return NotImplemented
        return (
            self.header == other.header
            and self.data.dtype == other.data.dtype
            and np.array_equal(self.data, other.data)
        )


@dataclass
class LabelMask:
    """Integer label volume plus the clinical name of each label."""

    volume: Volume3D
    label_names: dict[int, str]

    def __post_init__(self):
        data = self.volume.data
        if data.dtype.kind not in "iu":
            raise FormatError(f"label mask must be integer-typed, got {data.dtype}")
        if data.size and data.min() < 0:
            raise FormatError("label mask contains negative values")
        missing = self.label_set - set(self.label_names)
        if missing:
            raise ConfigError(f"labels {sorted(missing)} present in mask but unnamed")

    @property
    def label_set(self) -> set[int]:
        values = np.unique(self.volume.data)
        return {int(v) for v in values if v != 0}

    def binary(self, label: int) -> np.ndarray:
        return (self.volume.data == label).astype(np.uint8)


def orientation_code(affine: np.ndarray) -> str:
    """Three-letter orientation of the voxel axes.

    For each world axis in R, A, S order, the voxel axis with the
    largest-magnitude affine entry is claimed (ties broken by lower voxel
    axis index); its letter is the world axis letter, negated when the entry
    is negative.
    """
    aff = np.asarray(affine, dtype=np.float64)[:3, :3]
    letters = [""] * 3
    taken = [False] * 3
    for world in range(3):
        best_j, best_mag = -1, -1.0
        for j in range(3):
            if taken[j]:
                continue
            mag = abs(aff[world, j])
            if mag > best_mag:
                best_j, best_mag = j, mag
        taken[best_j] = True
        positive = aff[world, best_j] >= 0
        letters[best_j] = _POS_LETTERS[world] if positive else _NEG_LETTERS[world]
    return "".join(letters)


def voxel_volume(header: VolumeHeader) -> float:
    """Physical volume of one voxel in mm^3 (product of the spacings)."""
    sx, sy, sz = header.pixdim
    return sx * sy * sz


def _quaternion_affine(hdr: np.void) -> np.ndarray:
    b = float(hdr["quatern_b"])
    c = float(hdr["quatern_c"])
    d = float(hdr["quatern_d"])
    a = np.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
    rot = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ]
    )
    pixdim = np.asarray(hdr["pixdim"], dtype=np.float64)
    qfac = -1.0 if pixdim[0] < 0 else 1.0
    scales = np.array([pixdim[1], pixdim[2], qfac * pixdim[3]])
    affine = np.eye(4)
    affine[:3, :3] = rot * scales[None, :]
    affine[:3, 3] = [hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"]]
    return affine


def _decode_header(raw: bytes) -> tuple[np.void, str]:
    if len(raw) < HEADER_SIZE:
        raise TruncatedFileError(f"file shorter than the {HEADER_SIZE}-byte header")
    sizeof_le = int(np.frombuffer(raw, dtype="<i4", count=1)[0])
    sizeof_be = int(np.frombuffer(raw, dtype=">i4", count=1)[0])
    if 540 in (sizeof_le, sizeof_be):
        raise FormatError("NIfTI-2 files are not supported (NIfTI-1 only)")
    # Endianness heuristic: dim[0] (number of dimensions) must land in [1, 7].
    for order in ("<", ">"):
        ndim = int(np.frombuffer(raw[40:42], dtype=f"{order}i2")[0])
        if 1 <= ndim <= 7:
            hdr = np.frombuffer(raw[:HEADER_SIZE], dtype=_header_dtype(order))[0]
            return hdr, order
    raise FormatError("cannot determine byte order: dim[0] not in [1, 7] either way")


def parse_nifti(raw: bytes) -> Volume3D:
    """Decode a (possibly gzip-wrapped) NIfTI-1 byte sequence.

    Raises :class:`FormatError` for bad magic / NIfTI-2 / header-image pairs,
    :class:`UnsupportedDatatypeError` for datatype codes outside the scalar
    table, and :class:`TruncatedFileError` when the payload is short.
    """
    if raw[:2] == GZIP_MAGIC:
        raw = gzip.decompress(raw)
    hdr, order = _decode_header(raw)
    magic = bytes(hdr["magic"]).ljust(4, b"\x00")  # numpy strips trailing NULs
    if magic == MAGIC_PAIR:
        raise FormatError("header/image pairs (.hdr/.img) are not supported")
    if magic != MAGIC_SINGLE:
        raise FormatError(f"bad magic {magic!r}: not a NIfTI-1 single file")

    dim = np.asarray(hdr["dim"], dtype=np.int64)
    ndim = int(dim[0])
    extents = dim[1 : 1 + ndim]
    if (extents < 1).any():
        raise FormatError(f"non-positive dimension in {tuple(extents)}")
    if ndim > 3 and (extents[3:] != 1).any():
        raise FormatError(f"only 3D volumes supported, got shape {tuple(extents)}")
    dims = tuple(int(x) for x in extents[:3]) + (1,) * max(0, 3 - ndim)

    pixdim_raw = np.asarray(hdr["pixdim"], dtype=np.float64)[1:4]
    pixdim = []
    for axis, (extent, spacing) in enumerate(zip(dims, pixdim_raw)):
        if spacing > 0:
            pixdim.append(float(spacing))
        elif extent == 1:
            pixdim.append(1.0)  # padded axis, spacing unused
        else:
            raise FormatError(f"non-positive pixdim {spacing} on axis {axis}")

    code = int(hdr["datatype"])
    if code not in _DTYPE_BY_CODE:
        raise UnsupportedDatatypeError(f"unsupported NIfTI datatype code {code}")
    dtype = np.dtype(_DTYPE_BY_CODE[code]).newbyteorder(order)

    offset = int(round(float(hdr["vox_offset"])))
    if offset < HEADER_SIZE:
        raise FormatError(f"vox_offset {offset} overlaps the header")
    nbytes = int(np.prod(dims)) * dtype.itemsize
    payload = raw[offset : offset + nbytes]
    if len(payload) < nbytes:
        raise TruncatedFileError(
            f"payload holds {len(payload)} bytes, header declares {nbytes}"
        )
    data = np.frombuffer(payload, dtype=dtype).reshape(dims, order="F")
    data = data.astype(data.dtype.newbyteorder("="))

    slope = float(hdr["scl_slope"])
    inter = float(hdr["scl_inter"])
    if slope != 0.0 and (slope != 1.0 or inter != 0.0):
        data = data.astype(np.float64) * slope + inter

    if int(hdr["sform_code"]) > 0:
        affine = np.eye(4)
        affine[0] = np.asarray(hdr["srow_x"], dtype=np.float64)
        affine[1] = np.asarray(hdr["srow_y"], dtype=np.float64)
        affine[2] = np.asarray(hdr["srow_z"], dtype=np.float64)
    elif int(hdr["qform_code"]) > 0:
        affine = _quaternion_affine(hdr)
    else:
        affine = np.diag(pixdim + [1.0])

    header = VolumeHeader(dims=dims, pixdim=tuple(pixdim), affine=affine, datatype_code=code)
    return Volume3D(header=header, data=data)


def write_nifti(vol: Volume3D) -> bytes:
    """Serialize to NIfTI-1 single-file bytes (little-endian, sform only).

    ``parse_nifti(write_nifti(v))`` reproduces ``v`` exactly when the affine
    and pixdim are float32-representable (always true for parsed volumes);
    integer data round-trips bit-exactly.
    """
    dims = vol.header.dims
    if any(d > np.iinfo(np.int16).max for d in dims):
        raise CapacityError(f"dims {dims} exceed the signed 16-bit dim field")
    dtype = vol.data.dtype.newbyteorder("=")
    if dtype not in _CODE_BY_DTYPE:
        raise UnsupportedDatatypeError(f"cannot encode dtype {dtype} as NIfTI")
    code = _CODE_BY_DTYPE[dtype]

    hdr = np.zeros((), dtype=_header_dtype("<"))
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["regular"] = b"r"
    hdr["dim"][0] = 3
    hdr["dim"][1:4] = dims
    hdr["dim"][4:] = 1
    hdr["datatype"] = code
    hdr["bitpix"] = 8 * dtype.itemsize
    hdr["pixdim"][0] = 1.0
    hdr["pixdim"][1:4] = vol.header.pixdim
    hdr["vox_offset"] = float(VOX_OFFSET)
    hdr["scl_slope"] = 0.0
    hdr["scl_inter"] = 0.0
    hdr["sform_code"] = 1
    hdr["qform_code"] = 0
    hdr["srow_x"] = vol.header.affine[0]
    hdr["srow_y"] = vol.header.affine[1]
    hdr["srow_z"] = vol.header.affine[2]
    hdr["magic"] = MAGIC_SINGLE

    pad = b"\x00" * (VOX_OFFSET - HEADER_SIZE)  # empty extension flag
    body = np.ascontiguousarray(vol.data.astype(dtype, copy=False).reshape(-1, order="F"))
    return hdr.tobytes() + pad + body.tobytes()


def read_nifti_file(path) -> Volume3D:
    with open(path, "rb") as fh:
        return parse_nifti(fh.read())


def write_nifti_file(vol: Volume3D, path) -> None:
    raw = write_nifti(vol)
    if str(path).endswith(".gz"):
        raw = gzip.compress(raw, mtime=0)
    with open(path, "wb") as fh:
        fh.write(raw)


def conform_to_ras(
    vol: Volume3D,
    target_spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
    interpolation: str = "nearest",
) -> Volume3D:
    """Reorient to RAS and resample onto an axis-aligned grid at ``target_spacing``.

    The output grid covers the physical extent of the input (voxel edges, not
    centers), so conforming an already-RAS volume at its own spacing is the
    identity and conforming is idempotent.  Masks must use ``nearest`` so
    label values survive exactly; world coordinates of corresponding voxels
    agree within half a voxel.
    """
    if interpolation not in ("nearest", "trilinear"):
        raise ConfigError(f"unknown interpolation {interpolation!r}")
    spacing = np.asarray(target_spacing, dtype=np.float64)
    if spacing.shape != (3,) or (spacing <= 0).any():
        raise GeometryError(f"target spacing must be 3 positive reals, got {target_spacing}")

    affine = vol.header.affine
    try:
        inv = np.linalg.inv(affine)
    except np.linalg.LinAlgError:
        raise GeometryError("affine is not invertible") from None

    dims = np.asarray(vol.header.dims, dtype=np.float64)
    lows, highs = -0.5 * np.ones(3), dims - 0.5  # voxel-extent box, not centers
    corners = np.array(
        [[highs[a] if bits[a] else lows[a] for a in range(3)] for bits in np.ndindex(2, 2, 2)]
    )
    world = (affine[:3, :3] @ corners.T).T + affine[:3, 3]
    wmin = world.min(axis=0)
    wmax = world.max(axis=0)
    span = wmax - wmin
    out_dims = np.maximum(1, np.rint(span / spacing).astype(int))
    origin = wmin + spacing / 2.0

    out_affine = np.eye(4)
    out_affine[:3, :3] = np.diag(spacing)
    out_affine[:3, 3] = origin

    ii, jj, kk = np.meshgrid(
        np.arange(out_dims[0]), np.arange(out_dims[1]), np.arange(out_dims[2]), indexing="ij"
    )
    out_idx = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3).astype(np.float64)
    world_pts = out_idx * spacing + origin
    src = (inv[:3, :3] @ world_pts.T).T + inv[:3, 3]

    if interpolation == "nearest":
        nearest = np.rint(src).astype(np.int64)
        valid = ((nearest >= 0) & (nearest < vol.header.dims)).all(axis=1)
        out = np.zeros(int(np.prod(out_dims)), dtype=vol.data.dtype)
        nv = nearest[valid]
        out[valid] = vol.data[nv[:, 0], nv[:, 1], nv[:, 2]]
    else:
        out = _trilinear_sample(vol.data, src)
    out = out.reshape(tuple(out_dims))

    header = VolumeHeader(
        dims=tuple(int(d) for d in out_dims),
        pixdim=tuple(float(s) for s in spacing),
        affine=out_affine,
        datatype_code=vol.header.datatype_code if interpolation == "nearest" else 64,
    )
    return Volume3D(header=header, data=out)


def _trilinear_sample(data: np.ndarray, src: np.ndarray) -> np.ndarray:
    """Sample ``data`` at fractional voxel coordinates, zero outside."""
    values = data.astype(np.float64)
    base = np.floor(src).astype(np.int64)
    frac = src - base
    out = np.zeros(src.shape[0], dtype=np.float64)
    for corner in np.ndindex(2, 2, 2):
        offs = np.asarray(corner, dtype=np.int64)
        idx = base + offs
        weight = np.ones(src.shape[0])
        for axis in range(3):
            w_axis = frac[:, axis] if corner[axis] else 1.0 - frac[:, axis]
            weight = weight * w_axis
        valid = ((idx >= 0) & (idx < data.shape)).all(axis=1)
        contrib = np.zeros_like(out)
        iv = idx[valid]
        contrib[valid] = values[iv[:, 0], iv[:, 1], iv[:, 2]]
        out += weight * contrib
    return out
