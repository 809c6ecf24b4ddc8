"""Augmentations that keep a label volume and its 9-DoF boxes consistent.

Rigid translate/scale/rotate updates boxes analytically, without refitting.
Cropping along z refits truncated instances.  Bottom-pair erasure removes
the two highest labels.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .geometry import (
    Pose9DoF,
    canonicalize_frame,
    euler_to_matrix,
    matrix_to_euler,
    pca_parameterize,
    sample_volume,
)
from .rng import OP_CROP, OP_ERASE, OP_RIGID, make_rng
from .volume import LabelVolume, ScalarVolume, VolumeMeta, continuous_voxel_to_world, world_to_voxel

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AugmentConfig:
    max_translation: float = 20.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    rotation_range: tuple[float, float] = (-15.0, 15.0)
    erase_probability: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.max_translation < 0:
            raise ValueError("max_translation must be >= 0")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad scale_range {self.scale_range}")
        lo, hi = self.rotation_range
        if lo > hi:
            raise ValueError(f"bad rotation_range {self.rotation_range}")
        if not 0.0 <= self.erase_probability <= 1.0:
            raise ValueError("erase_probability must be in [0, 1]")


@dataclass(frozen=True)
class RigidDraw:
    translation: np.ndarray
    scale: float
    angles: np.ndarray

    @property
    def rotation(self) -> np.ndarray:
        return euler_to_matrix(self.angles)


def draw_rigid(config: AugmentConfig, case: int = 0) -> RigidDraw:
    rng = make_rng(config.seed, case, OP_RIGID)
    # uniform within the ball of radius max_translation
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    t = direction * config.max_translation * rng.uniform() ** (1.0 / 3.0)
    s = rng.uniform(*config.scale_range)
    angles = rng.uniform(config.rotation_range[0], config.rotation_range[1], 3)
    return RigidDraw(t, float(s), angles)


def rigid_transform(meta: VolumeMeta, draw: RigidDraw):
    """World map ``x -> pivot + s * R (x - pivot) + t`` about the image center, and its inverse."""
    pivot = meta.center_world
    r = draw.rotation
    s = draw.scale
    t = np.asarray(draw.translation, float)

    def forward(x):
        return pivot + s * (np.asarray(x, float) - pivot) @ r.T + t

    def inverse(y):
        return pivot + ((np.asarray(y, float) - t - pivot) @ r) / s

    return forward, inverse


def rigid_augment(volume, poses: Sequence[Pose9DoF], draw: RigidDraw):
    """Resample ``volume`` under the drawn similarity and update the boxes analytically."""
    meta = volume.meta
    forward, inverse = rigid_transform(meta, draw)
    grid = np.indices(meta.dims).reshape(3, -1).T
    src_world = inverse(continuous_voxel_to_world(meta, grid))
    mode = "nearest" if isinstance(volume, LabelVolume) else "trilinear"
    vals = sample_volume(volume, world_to_voxel(meta, src_world), mode).reshape(meta.dims)
    out = LabelVolume(meta, vals) if isinstance(volume, LabelVolume) else ScalarVolume(meta, vals)

    r = draw.rotation
    new_poses = []
    for p in poses:
        frame = canonicalize_frame(r @ p.rotation)
        new_poses.append(Pose9DoF(p.label, forward(p.center), p.scale * draw.scale, matrix_to_euler(frame)))
    return out, new_poses


def random_rigid_augment(volume, poses, config: AugmentConfig, case: int = 0):
    return rigid_augment(volume, poses, draw_rigid(config, case))


def crop_z(volume, z0: int, z1: int) -> LabelVolume | ScalarVolume:
    """Keep slices ``z0 <= z < z1``; the origin moves so world positions are preserved."""
    nz = volume.meta.dims[2]
    if not 0 <= z0 < z1 <= nz:
        raise ValueError(f"empty or out-of-range crop interval [{z0}, {z1}) for {nz} slices")
    meta = volume.meta
    origin = continuous_voxel_to_world(meta, (0, 0, z0))
    new_meta = VolumeMeta((meta.dims[0], meta.dims[1], z1 - z0), meta.spacing, tuple(origin), meta.direction)
    data = volume.voxels[:, :, z0:z1]
    return type(volume)(new_meta, data)


def random_crop_z(volume: LabelVolume, poses: Sequence[Pose9DoF], interval: Optional[tuple[int, int]] = None,
                  seed: int = 0, case: int = 0, min_slices: int = 1):
    """Crop along z and refit every truncated instance.

    Untouched instances keep their boxes, truncated ones are refitted on
    what survives, and instances cropped away entirely are dropped.  When
    ``interval`` is None it is drawn from the seeded stream.
    """
    nz = volume.meta.dims[2]
    if interval is None:
        rng = make_rng(seed, case, OP_CROP)
        length = int(rng.integers(min(min_slices, nz), nz + 1))
        z0 = int(rng.integers(0, nz - length + 1))
        interval = (z0, z0 + length)
    z0, z1 = interval
    out = crop_z(volume, z0, z1)
    before = {lab: int(c) for lab, c in zip(*np.unique(volume.voxels, return_counts=True)) if lab}
    after = {lab: int(c) for lab, c in zip(*np.unique(out.voxels, return_counts=True)) if lab}
    new_poses = []
    for p in poses:
        kept = after.get(p.label, 0)
        if kept == 0:
            continue
        if kept == before.get(p.label, 0):
            new_poses.append(p)
        else:
            new_poses.append(pca_parameterize(out, p.label))
    if not new_poses:
        log.info("crop [%d, %d) removed every instance", z0, z1)
    return out, new_poses


def random_erase_bottom_pair(volume: LabelVolume, poses: Sequence[Pose9DoF], probability: float,
                             seed: int = 0, case: int = 0):
    """With the given probability, erase the two highest-labeled instances."""
    if not 0.0 <= probability <= 1.0:
        raise ValueError("probability must be in [0, 1]")
    rng = make_rng(seed, case, OP_ERASE)
    fire = rng.uniform() < probability
    if not fire:
        return volume, list(poses)
    labels = sorted({p.label for p in poses})
    if len(labels) < 2:
        log.warning("fewer than two instances; bottom-pair erase skipped")
        return volume, list(poses)
    gone = set(labels[-2:])
    vox = volume.voxels.copy()
    vox[np.isin(vox, list(gone))] = 0
    return LabelVolume(volume.meta, vox), [p for p in poses if p.label not in gone]
