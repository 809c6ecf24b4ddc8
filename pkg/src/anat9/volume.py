"""Label and scalar volumes with world-coordinate metadata, plus file I/O.

Two on-disk formats are understood:

* the native container, a JSON header next to a little-endian raw voxel
  file (x-fastest order), which round-trips bit-exactly;
* single-file NIfTI-1 (``.nii`` / ``.nii.gz``) for uint8, int16, uint16,
  int32 and float32 data.

Voxel arrays are held as numpy arrays of shape ``dims`` indexed ``[x, y, z]``.
Voxel indices refer to voxel centers.
"""
from __future__ import annotations

import gzip
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

_ORTHO_TOL = 1e-6

DTYPES = {
    "u8": np.dtype("<u1"),
    "u16": np.dtype("<u2"),
    "i16": np.dtype("<i2"),
    "i32": np.dtype("<i4"),
    "f32": np.dtype("<f4"),
}
_LABEL_DTYPES = ("u8", "u16", "i16", "i32")


class VolumeError(ValueError):
    """Raised for malformed headers, unsupported data or inconsistent metadata."""


@dataclass(frozen=True)
class VolumeMeta:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    direction: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        direction = np.array(self.direction, dtype=float).reshape(3, 3)
        if len(dims) != 3 or min(dims) < 1:
            raise VolumeError(f"malformed header: dims must be 3 positive integers, got {self.dims}")
        if len(spacing) != 3 or not all(np.isfinite(spacing)) or min(spacing) <= 0:
            raise VolumeError(f"malformed header: spacing must be positive, got {self.spacing}")
        if len(origin) != 3 or not all(np.isfinite(origin)):
            raise VolumeError(f"malformed header: bad origin {self.origin}")
        if not np.allclose(direction.T @ direction, np.eye(3), atol=_ORTHO_TOL):
            raise VolumeError("malformed header: direction matrix is not orthonormal")
        if abs(np.linalg.det(direction) - 1.0) > _ORTHO_TOL:
            raise VolumeError("malformed header: direction matrix has determinant -1 (flipped axes unsupported)")
        direction.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "direction", direction)

    def __eq__(self, other):
        if not isinstance(other, VolumeMeta):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and self.origin == other.origin
            and np.array_equal(self.direction, other.direction)
        )

    def __hash__(self):
        return hash((self.dims, self.spacing, self.origin, self.direction.tobytes()))

    @property
    def extent_mm(self) -> np.ndarray:
        """Physical size of the grid, ``dims * spacing``."""
        return np.asarray(self.dims, float) * np.asarray(self.spacing)

    @property
    def center_world(self) -> np.ndarray:
        """World position of the geometric center of the grid."""
        return continuous_voxel_to_world(self, (np.asarray(self.dims, float) - 1.0) / 2.0)

    def affine(self) -> np.ndarray:
        """4x4 voxel-index to world matrix."""
        a = np.eye(4)
        a[:3, :3] = self.direction * np.asarray(self.spacing)[None, :]
        a[:3, 3] = self.origin
        return a

    def to_json(self) -> dict:
        return {
            "dims": list(self.dims),
            "spacing_mm": list(self.spacing),
            "origin_mm": list(self.origin),
            "direction": [float(v) for v in self.direction.ravel()],
        }

    @classmethod
    def from_json(cls, d: dict) -> "VolumeMeta":
        try:
            return cls(
                dims=tuple(d["dims"]),
                spacing=tuple(d["spacing_mm"]),
                origin=tuple(d["origin_mm"]),
                direction=np.asarray(d["direction"], float).reshape(3, 3),
            )
        except (KeyError, TypeError) as exc:
            raise VolumeError(f"malformed header: {exc}") from exc


def _check_voxels(meta: VolumeMeta, voxels) -> np.ndarray:
    arr = np.asarray(voxels)
    if arr.ndim == 1:
        if arr.size != int(np.prod(meta.dims)):
            raise VolumeError(f"voxel count {arr.size} does not match dims {meta.dims}")
        arr = arr.reshape(meta.dims, order="F")
    if arr.shape != meta.dims:
        raise VolumeError(f"voxel array shape {arr.shape} does not match dims {meta.dims}")
    return arr


@dataclass(frozen=True, eq=False)
class LabelVolume:
    meta: VolumeMeta
    voxels: np.ndarray

    def __post_init__(self):
        arr = _check_voxels(self.meta, self.voxels)
        if arr.dtype.kind not in "iub":
            raise VolumeError(f"label volume needs integer voxels, got {arr.dtype}")
        if arr.size and (arr.min() < 0 or arr.max() > 0xFFFF):
            raise VolumeError("label values must be non-negative and fit in 16 bits")
        arr = np.array(arr, dtype=np.uint16)
        arr.setflags(write=False)
        object.__setattr__(self, "voxels", arr)

    def labels(self) -> list[int]:
        """Sorted non-background labels present in the volume."""
        return [int(v) for v in np.unique(self.voxels) if v != 0]

    def mask(self, label: int) -> np.ndarray:
        return self.voxels == label


@dataclass(frozen=True, eq=False)
class ScalarVolume:
    meta: VolumeMeta
    voxels: np.ndarray

    def __post_init__(self):
        arr = np.array(_check_voxels(self.meta, self.voxels), dtype=np.float64)
        arr.setflags(write=False)
        object.__setattr__(self, "voxels", arr)


Volume = Union[LabelVolume, ScalarVolume]


def voxel_to_world(meta: VolumeMeta, index) -> np.ndarray:
    """World position (mm) of the center of an integer voxel index."""
    idx = np.asarray(index)
    if idx.shape != (3,):
        raise IndexError(f"expected an index triple, got {index!r}")
    if np.any(idx < 0) or np.any(idx >= np.asarray(meta.dims)):
        raise IndexError(f"voxel index {tuple(idx)} outside dims {meta.dims}")
    return continuous_voxel_to_world(meta, idx)


def continuous_voxel_to_world(meta: VolumeMeta, index) -> np.ndarray:
    """Vectorised ``origin + direction @ (index * spacing)``; accepts (..., 3)."""
    idx = np.asarray(index, dtype=float)
    scaled = idx * np.asarray(meta.spacing)
    return np.asarray(meta.origin) + scaled @ meta.direction.T


def world_to_voxel(meta: VolumeMeta, point) -> np.ndarray:
    """Continuous voxel index of a world point; inverse of the map above."""
    p = np.asarray(point, dtype=float) - np.asarray(meta.origin)
    return (p @ meta.direction) / np.asarray(meta.spacing)


def voxel_centers_world(meta: VolumeMeta, mask: np.ndarray) -> np.ndarray:
    """(n, 3) world coordinates of the voxels selected by a boolean mask."""
    idx = np.argwhere(mask)
    return continuous_voxel_to_world(meta, idx)


# --------------------------------------------------------------------------
# native raw + JSON container


def _save_native(volume: Volume, path: Path) -> None:
    if isinstance(volume, LabelVolume):
        code = "u16"
    else:
        code = "f32"
        if not np.array_equal(volume.voxels.astype(np.float32).astype(np.float64), volume.voxels):
            # keep the container lossless for values that do not fit f32
            code = "f64"
    raw_name = path.with_suffix(".raw").name
    header = volume.meta.to_json()
    header["dtype"] = code
    header["data"] = raw_name
    dtype = DTYPES.get(code, np.dtype("<f8"))
    data = np.ascontiguousarray(volume.voxels.ravel(order="F").astype(dtype))
    (path.parent / raw_name).write_bytes(data.tobytes())
    path.write_text(json.dumps(header, indent=1))


def _load_native(path: Path, kind: str) -> Volume:
    try:
        header = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeError(f"malformed header: {exc}") from exc
    meta = VolumeMeta.from_json(header)
    code = header.get("dtype")
    if code == "f64":
        dtype = np.dtype("<f8")
    elif code in DTYPES:
        dtype = DTYPES[code]
    else:
        raise VolumeError(f"unsupported data type {code!r}")
    raw = np.fromfile(path.parent / header["data"], dtype=dtype)
    if raw.size != int(np.prod(meta.dims)):
        raise VolumeError(f"raw file holds {raw.size} voxels, header dims {meta.dims}")
    return _make(meta, raw.reshape(meta.dims, order="F"), kind, code)


def _make(meta: VolumeMeta, arr: np.ndarray, kind: str, code: str) -> Volume:
    if kind == "label":
        if code not in _LABEL_DTYPES:
            raise VolumeError(f"unsupported data type {code!r} for a label volume")
        return LabelVolume(meta, arr)
    if kind == "scalar":
        return ScalarVolume(meta, arr)
    raise ValueError(f"kind must be 'label' or 'scalar', got {kind!r}")


# --------------------------------------------------------------------------
# NIfTI-1

_NIFTI_CODES = {2: "u8", 4: "i16", 8: "i32", 16: "f32", 512: "u16"}
_NIFTI_CODES_INV = {v: k for k, v in _NIFTI_CODES.items()}


def _is_nifti(path: Path) -> bool:
    name = path.name.lower()
    return name.endswith(".nii") or name.endswith(".nii.gz")


def _quat_to_matrix(b: float, c: float, d: float) -> np.ndarray:
    a2 = 1.0 - (b * b + c * c + d * d)
    if a2 < -1e-6:
        raise VolumeError("malformed header: invalid qform quaternion")
    a = np.sqrt(max(a2, 0.0))
    return np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ])


def _read_nifti(path: Path, kind: str) -> Volume:
    blob = path.read_bytes()
    if path.name.lower().endswith(".gz"):
        blob = gzip.decompress(blob)
    if len(blob) < 348:
        raise VolumeError("malformed header: file shorter than a NIfTI-1 header")
    endian = "<"
    if struct.unpack("<i", blob[:4])[0] != 348:
        endian = ">"
        if struct.unpack(">i", blob[:4])[0] != 348:
            raise VolumeError("malformed header: sizeof_hdr is not 348")
    if blob[344:348] not in (b"n+1\x00", b"ni1\x00"):
        raise VolumeError("malformed header: bad NIfTI magic")
    if blob[344:348] == b"ni1\x00":
        raise VolumeError("unsupported data type: two-file NIfTI pairs are not supported")

    dim = struct.unpack(endian + "8h", blob[40:56])
    datatype = struct.unpack(endian + "h", blob[70:72])[0]
    pixdim = struct.unpack(endian + "8f", blob[76:108])
    vox_offset = struct.unpack(endian + "f", blob[108:112])[0]
    scl_slope, scl_inter = struct.unpack(endian + "2f", blob[112:120])
    qform_code, sform_code = struct.unpack(endian + "2h", blob[252:256])
    qb, qc, qd, qx, qy, qz = struct.unpack(endian + "6f", blob[256:280])
    srow = np.array(struct.unpack(endian + "12f", blob[280:328]), dtype=float).reshape(3, 4)

    ndim = dim[0]
    if ndim < 1 or ndim > 7:
        raise VolumeError(f"malformed header: dim[0] = {ndim}")
    if ndim > 3 and any(d > 1 for d in dim[4 : ndim + 1]):
        raise VolumeError("unsupported data type: only 3D volumes are supported")
    dims = tuple(int(dim[i]) if i <= ndim else 1 for i in (1, 2, 3))
    if min(dims) < 1:
        raise VolumeError(f"malformed header: dims {dims}")
    code = _NIFTI_CODES.get(datatype)
    if code is None:
        raise VolumeError(f"unsupported data type: NIfTI datatype code {datatype}")
    spacing = tuple(float(pixdim[i]) if i <= ndim else 1.0 for i in (1, 2, 3))
    if min(spacing) <= 0:
        raise VolumeError(f"malformed header: non-positive pixdim {spacing}")

    if sform_code > 0:
        lin = srow[:, :3]
        origin = srow[:, 3]
        norms = np.linalg.norm(lin, axis=0)
        if np.any(norms <= 0):
            raise VolumeError("malformed header: singular sform")
        # pixdim often mirrors the qform; the sform columns define the spacing
        direction = lin / norms
        spacing = tuple(norms)
    elif qform_code > 0:
        qfac = -1.0 if pixdim[0] < 0 else 1.0
        direction = _quat_to_matrix(qb, qc, qd)
        direction[:, 2] *= qfac
        origin = np.array([qx, qy, qz], dtype=float)
    else:
        direction = np.eye(3)
        origin = np.zeros(3)
    meta = VolumeMeta(dims, spacing, tuple(origin), direction)

    dtype = DTYPES[code].newbyteorder(endian)
    n = int(np.prod(dims))
    start = int(vox_offset)
    if start < 348 or start + n * dtype.itemsize > len(blob):
        raise VolumeError("dims/affine inconsistency: data block shorter than dims imply")
    arr = np.frombuffer(blob, dtype=dtype, count=n, offset=start).reshape(dims, order="F")
    if kind == "scalar" and scl_slope != 0.0 and (scl_slope, scl_inter) != (1.0, 0.0):
        arr = arr.astype(np.float64) * scl_slope + scl_inter
    return _make(meta, arr.astype(arr.dtype.newbyteorder("=")), kind, code)


def _write_nifti(volume: Volume, path: Path) -> None:
    meta = volume.meta
    if isinstance(volume, LabelVolume):
        code = "u16"
    else:
        code = "f32"
    hdr = bytearray(352)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, *meta.dims, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, _NIFTI_CODES_INV[code], DTYPES[code].itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *meta.spacing, 0, 0, 0, 0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    struct.pack_into("<B", hdr, 123, 10)  # xyzt_units: mm, s
    struct.pack_into("<2h", hdr, 252, 0, 2)
    srow = meta.affine()[:3]
    struct.pack_into("<12f", hdr, 280, *srow.ravel())
    hdr[344:348] = b"n+1\x00"
    data = volume.voxels.ravel(order="F").astype(DTYPES[code]).tobytes()
    blob = bytes(hdr) + data
    if path.name.lower().endswith(".gz"):
        blob = gzip.compress(blob)
    path.write_bytes(blob)


# --------------------------------------------------------------------------


def load_volume(path: Union[str, os.PathLike], kind: str = "label") -> Volume:
    """Read a label or scalar volume from a NIfTI-1 file or a native JSON header."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if _is_nifti(path):
        return _read_nifti(path, kind)
    return _load_native(path, kind)


def save_volume(volume: Volume, path: Union[str, os.PathLike]) -> None:
    """Write a volume. ``.nii``/``.nii.gz`` selects NIfTI-1, anything else the native container."""
    path = Path(path)
    if _is_nifti(path):
        _write_nifti(volume, path)
    else:
        _save_native(volume, path)
