"""Oriented 9-DoF box mathematics.

A box is ``(x, y, z, w, h, d, alpha, beta, gamma)``: a world-space center in
mm, edge lengths in mm along the box's local axes, and Euler angles in
degrees about the world Z, Y and X axes.  The local frame is
``R = Rx(gamma) @ Ry(beta) @ Rz(alpha)``, whose columns are the local x/y/z
axes expressed in world coordinates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .volume import (
    LabelVolume,
    ScalarVolume,
    Volume,
    VolumeMeta,
    continuous_voxel_to_world,
    voxel_centers_world,
    world_to_voxel,
)

GIMBAL_TOL_DEG = 1e-7
# relative eigenvalue gap below which principal axes are considered tied
TIE_TOL = 1e-9
MIN_PCA_VOXELS = 4


class GeometryError(ValueError):
    pass


def canonical_angle(a):
    """Wrap degrees into (-180, 180]."""
    return 0.0 - ((180.0 - np.asarray(a, dtype=float)) % 360.0 - 180.0)


@dataclass(frozen=True, eq=False)
class Pose9DoF:
    label: int
    center: np.ndarray
    scale: np.ndarray
    angles: np.ndarray

    def __post_init__(self):
        center = np.array(self.center, dtype=float).reshape(3)
        scale = np.array(self.scale, dtype=float).reshape(3)
        angles = canonical_angle(np.array(self.angles, dtype=float).reshape(3))
        if np.any(scale <= 0) or not np.all(np.isfinite(scale)):
            raise GeometryError(f"box scale must be positive, got {scale}")
        if not (np.all(np.isfinite(center)) and np.all(np.isfinite(angles))):
            raise GeometryError("non-finite box parameters")
        for arr in (center, scale, angles):
            arr.setflags(write=False)
        object.__setattr__(self, "label", int(self.label))
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "angles", angles)

    @property
    def rotation(self) -> np.ndarray:
        return euler_to_matrix(self.angles)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.center, self.scale, self.angles])

    def replace(self, **kw) -> "Pose9DoF":
        fields = dict(label=self.label, center=self.center, scale=self.scale, angles=self.angles)
        fields.update(kw)
        return Pose9DoF(**fields)

    def to_json(self) -> dict:
        return {
            "label": self.label,
            "center_mm": [float(v) for v in self.center],
            "scale_mm": [float(v) for v in self.scale],
            "angles_deg": [float(v) for v in self.angles],
        }

    @classmethod
    def from_json(cls, d: dict) -> "Pose9DoF":
        return cls(int(d["label"]), d["center_mm"], d["scale_mm"], d["angles_deg"])

    @classmethod
    def from_frame(cls, label, center, scale, frame) -> "Pose9DoF":
        return cls(label, center, scale, matrix_to_euler(frame))


# --------------------------------------------------------------------------
# rotations


def rot_x(deg: float) -> np.ndarray:
    t = math.radians(deg)
    c, s = math.cos(t), math.sin(t)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(deg: float) -> np.ndarray:
    t = math.radians(deg)
    c, s = math.cos(t), math.sin(t)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(deg: float) -> np.ndarray:
    t = math.radians(deg)
    c, s = math.cos(t), math.sin(t)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_to_matrix(angles) -> np.ndarray:
    """Rotation for (alpha, beta, gamma) degrees about world Z, then Y, then X."""
    alpha, beta, gamma = (float(a) for a in angles)
    return rot_x(gamma) @ rot_y(beta) @ rot_z(alpha)


def is_rotation(r, tol: float = 1e-6) -> bool:
    r = np.asarray(r, dtype=float)
    return (
        r.shape == (3, 3)
        and np.allclose(r.T @ r, np.eye(3), atol=tol)
        and abs(np.linalg.det(r) - 1.0) < tol
    )


def matrix_to_euler(r) -> np.ndarray:
    """Inverse of :func:`euler_to_matrix`.

    beta is returned in [-90, 90]. At gimbal lock gamma is set to 0 and the
    free rotation is folded into alpha.
    """
    r = np.asarray(r, dtype=float)
    if not is_rotation(r):
        raise GeometryError("input is not a proper rotation matrix")
    cb = math.hypot(r[0, 0], r[0, 1])
    beta = math.degrees(math.atan2(r[0, 2], cb))
    if abs(abs(beta) - 90.0) < GIMBAL_TOL_DEG or cb < math.sin(math.radians(GIMBAL_TOL_DEG)):
        gamma = 0.0
        alpha = math.degrees(math.atan2(r[1, 0], r[1, 1]))
        beta = math.copysign(90.0, r[0, 2])
    else:
        alpha = math.degrees(math.atan2(-r[0, 1], r[0, 0]))
        gamma = math.degrees(math.atan2(-r[1, 2], r[2, 2]))
    return canonical_angle(np.array([alpha, beta, gamma]))


def canonicalize_frame(frame) -> np.ndarray:
    """Fix eigenvector signs: largest-magnitude component positive, then det +1."""
    f = np.array(frame, dtype=float)
    for k in range(3):
        col = f[:, k]
        j = int(np.argmax(np.abs(col)))
        if col[j] < 0:
            f[:, k] = -col
    if np.linalg.det(f) < 0:
        f[:, 2] = -f[:, 2]
    return f


def canonical_box_frame(frame, scale):
    """Reorder a box frame by descending edge length and canonicalize signs.

    Returns ``(frame, scale)``; the box described is unchanged.
    """
    frame = np.asarray(frame, dtype=float)
    scale = np.asarray(scale, dtype=float)
    order = np.argsort(-scale, kind="stable")
    return canonicalize_frame(frame[:, order]), scale[order]


def _resolve_ties(vals: np.ndarray, vecs: np.ndarray, trace: float) -> np.ndarray:
    """Replace eigenvectors of tied eigenvalues by a world-aligned basis of their span."""
    vecs = vecs.copy()
    tol = TIE_TOL * max(trace, 1e-300)
    groups, start = [], 0
    for i in range(1, 4):
        if i == 3 or vals[i - 1] - vals[i] >= tol:
            if i - start > 1:
                groups.append(list(range(start, i)))
            start = i
    for group in groups:
        basis = vecs[:, group]
        proj = basis @ basis.T
        chosen = []
        for axis in (2, 1, 0):  # world Z, Y, X priority
            u = proj[:, axis].copy()
            for _, v in chosen:
                u -= (v @ u) * v
            n = np.linalg.norm(u)
            if n > 1e-6:
                chosen.append((axis, u / n))
            if len(chosen) == len(group):
                break
        chosen.sort(key=lambda t: t[0])
        for slot, (_, v) in zip(group, chosen):
            vecs[:, slot] = v
    return vecs


def principal_frame(points: np.ndarray):
    """Principal axes of a point set, sorted by descending variance.

    Returns ``(frame, degenerate)``; the frame is the identity for degenerate
    (too few points or rank-deficient) inputs.
    """
    pts = np.asarray(points, dtype=float)
    if len(pts) < MIN_PCA_VOXELS:
        return np.eye(3), True
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered / len(pts)
    vals, vecs = np.linalg.eigh(cov)
    trace = float(np.trace(cov))
    if trace <= 0 or vals[0] <= 1e-10 * trace:
        return np.eye(3), True
    order = np.argsort(-vals, kind="stable")
    vals, vecs = vals[order], vecs[:, order]
    vecs = _resolve_ties(vals, vecs, trace)
    return canonicalize_frame(vecs), False


def pca_box(points: np.ndarray, meta: VolumeMeta, label: int) -> Pose9DoF:
    """9-DoF box from world coordinates of voxel centers on ``meta``'s grid."""
    pts = np.asarray(points, dtype=float)
    if len(pts) == 0:
        raise GeometryError(f"label {label} is absent")
    frame, degenerate = principal_frame(pts)
    proj = pts @ frame
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    # extent of one voxel cell along each local axis
    cell = np.abs(frame.T @ meta.direction) @ np.asarray(meta.spacing)
    scale = np.maximum(hi - lo, cell) if degenerate else hi - lo + cell
    center = frame @ ((lo + hi) / 2.0)
    return Pose9DoF(label, center, scale, matrix_to_euler(frame))


def pca_parameterize(volume: LabelVolume, label: int) -> Pose9DoF:
    """Fit the 9-DoF box of one labeled instance.

    Axes are the covariance eigenvectors of the labeled voxel centers (world
    mm), ordered by descending eigenvalue.  Edge lengths are the projected
    extent of the voxel centers plus one voxel cell, so every labeled voxel
    center lies inside the box.
    """
    mask = volume.voxels == label
    if not mask.any():
        raise GeometryError(f"label {label} is absent")
    return pca_box(voxel_centers_world(volume.meta, mask), volume.meta, label)


def box_corners(pose: Pose9DoF) -> np.ndarray:
    signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float)
    local = signs * (pose.scale / 2.0)
    return pose.center + local @ pose.rotation.T


def contains(pose: Pose9DoF, point, expansion: float = 0.0, tol: float = 1e-9):
    """Whether point(s) lie in the closed box grown by ``expansion`` mm per side.

    Accepts a single point or an (n, 3) array. ``tol`` absorbs round-off.
    """
    p = np.asarray(point, dtype=float)
    local = (p - pose.center) @ pose.rotation
    inside = np.all(np.abs(local) <= pose.scale / 2.0 + expansion + tol, axis=-1)
    return bool(inside) if inside.ndim == 0 else inside


# --------------------------------------------------------------------------
# crop / resample / merge


def crop_meta(pose: Pose9DoF, expansion: float, out_dims: Sequence[int]) -> VolumeMeta:
    """Grid spanning the expanded box with ``out_dims`` samples, in the box frame."""
    out_dims = tuple(int(d) for d in out_dims)
    if len(out_dims) != 3 or min(out_dims) < 1:
        raise GeometryError(f"out_dims must be 3 positive integers, got {out_dims}")
    if expansion < 0:
        raise GeometryError("expansion must be >= 0")
    frame = pose.rotation
    half = pose.scale / 2.0 + expansion
    step = 2.0 * half / np.asarray(out_dims, float)
    origin = pose.center + frame @ (-half + 0.5 * step)
    return VolumeMeta(out_dims, tuple(step), tuple(origin), frame)


def _sample_indices(src: VolumeMeta, dst: VolumeMeta) -> np.ndarray:
    grid = np.indices(dst.dims).reshape(3, -1).T
    world = continuous_voxel_to_world(dst, grid)
    return world_to_voxel(src, world)


def sample_volume(volume: Volume, idx: np.ndarray, mode: str) -> np.ndarray:
    """Read ``volume`` at continuous voxel indices (n, 3); outside the grid reads 0."""
    dims = np.asarray(volume.meta.dims)
    outside = np.any((idx < -0.5) | (idx > dims - 0.5), axis=1)
    if mode == "nearest":
        near = np.floor(idx + 0.5).astype(np.int64)
        near = np.clip(near, 0, dims - 1)
        vals = volume.voxels[near[:, 0], near[:, 1], near[:, 2]].copy()
    elif mode == "trilinear":
        if isinstance(volume, LabelVolume):
            raise GeometryError("trilinear sampling is not allowed on label volumes")
        vals = ndimage.map_coordinates(volume.voxels, idx.T, order=1, mode="nearest")
    else:
        raise GeometryError(f"unknown sampling mode {mode!r}")
    vals[outside] = 0
    return vals


def resample_to(volume: Volume, meta: VolumeMeta, mode: str = "nearest") -> Volume:
    """Resample onto an arbitrary target grid."""
    vals = sample_volume(volume, _sample_indices(volume.meta, meta), mode)
    vals = vals.reshape(meta.dims)
    if isinstance(volume, LabelVolume):
        return LabelVolume(meta, vals)
    return ScalarVolume(meta, vals)


def crop_resample(volume: Volume, pose: Pose9DoF, expansion: float, out_dims, mode: str = "nearest") -> Volume:
    """Crop the (expanded) oriented box out of ``volume`` onto an ``out_dims`` grid.

    The returned volume carries its own metadata: box-frame direction and the
    sampling step as spacing, so it can be mapped back to world coordinates.
    """
    if mode == "trilinear" and isinstance(volume, LabelVolume):
        raise GeometryError("trilinear sampling is not allowed on label volumes")
    return resample_to(volume, crop_meta(pose, expansion, out_dims), mode)


def grid_crop_box(pose: Pose9DoF, meta: VolumeMeta, expansion: float = 0.0):
    """Voxel-aligned box enclosing ``pose`` on ``meta``'s own grid.

    Returns ``(pose, out_dims)`` such that :func:`crop_resample` reads input
    voxels one-to-one (the sampling grid is unchanged).
    """
    corners = box_corners(pose.replace(scale=pose.scale + 2.0 * expansion))
    idx = world_to_voxel(meta, corners)
    lo = np.clip(np.floor(idx.min(axis=0)), 0, np.asarray(meta.dims) - 1).astype(int)
    hi = np.clip(np.ceil(idx.max(axis=0)), 0, np.asarray(meta.dims) - 1).astype(int)
    n = hi - lo + 1
    center = continuous_voxel_to_world(meta, (lo + hi) / 2.0)
    box = Pose9DoF(pose.label, center, n * np.asarray(meta.spacing), matrix_to_euler(meta.direction))
    return box, tuple(int(v) for v in n)


def merge_back(submasks: Iterable[tuple[LabelVolume, int]], target: VolumeMeta) -> LabelVolume:
    """Paste binary submasks into an instance volume on ``target``'s grid.

    Each submask carries its crop geometry in its metadata.  Instances are
    written in ascending label order and never overwrite existing
    foreground.
    """
    out = np.zeros(target.dims, dtype=np.uint16)
    dims = np.asarray(target.dims)
    for mask, label in sorted(submasks, key=lambda t: int(t[1])):
        if label < 1:
            raise GeometryError(f"instance labels must be >= 1, got {label}")
        idx = np.argwhere(mask.voxels != 0)
        if len(idx) == 0:
            continue
        world = continuous_voxel_to_world(mask.meta, idx)
        t = np.floor(world_to_voxel(target, world) + 0.5).astype(np.int64)
        t = t[np.all((t >= 0) & (t < dims), axis=1)]
        t = np.unique(t, axis=0)
        free = out[t[:, 0], t[:, 1], t[:, 2]] == 0
        t = t[free]
        out[t[:, 0], t[:, 1], t[:, 2]] = label
    return LabelVolume(target, out)


# --------------------------------------------------------------------------
# normalized regression targets


def normalize_target(pose: Pose9DoF, meta: VolumeMeta, clip: bool = False) -> np.ndarray:
    """Map a box to 9 numbers in [0, 1].

    position = voxel-frame center / dims (voxel cells span [0, 1]),
    scale = mm / (dims * spacing), angle = (deg + 180) / 360.
    """
    dims = np.asarray(meta.dims, float)
    pos = (world_to_voxel(meta, pose.center) + 0.5) / dims
    scale = pose.scale / meta.extent_mm
    ang = (pose.angles + 180.0) / 360.0
    vec = np.concatenate([pos, scale, ang])
    if clip:
        return np.clip(vec, 0.0, 1.0)
    if np.any(vec < 0) or np.any(vec > 1):
        raise GeometryError(f"normalized target outside [0, 1]: {np.round(vec, 4).tolist()}")
    return vec


def denormalize_target(vec, meta: VolumeMeta, label: int) -> Pose9DoF:
    vec = np.asarray(vec, dtype=float).reshape(9)
    dims = np.asarray(meta.dims, float)
    center = continuous_voxel_to_world(meta, vec[:3] * dims - 0.5)
    scale = vec[3:6] * meta.extent_mm
    angles = vec[6:9] * 360.0 - 180.0
    return Pose9DoF(label, center, scale, angles)


# --------------------------------------------------------------------------
# ROI


@dataclass(frozen=True)
class ROI:
    center: tuple[float, float, float]
    extents: tuple[float, float, float]

    def contains(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return np.all(np.abs(p - np.asarray(self.center)) <= np.asarray(self.extents) / 2.0 + 1e-9, axis=-1)


def roi_from_foreground(mask: LabelVolume) -> ROI:
    """Axis-aligned ROI from a coarse foreground mask.

    The center is the mean world coordinate of foreground voxels.  Extents
    are symmetric about that center and wide enough to enclose every
    foreground voxel cell.
    """
    fg = mask.voxels != 0
    if not fg.any():
        raise GeometryError("empty foreground")
    pts = voxel_centers_world(mask.meta, fg)
    center = pts.mean(axis=0)
    reach = np.maximum(pts.max(axis=0) - center, center - pts.min(axis=0))
    margin = np.abs(mask.meta.direction) @ np.asarray(mask.meta.spacing)
    extents = 2.0 * reach + margin
    return ROI(tuple(float(v) for v in center), tuple(float(v) for v in extents))
