"""Synthetic scenes of ordered, oriented cuboid instances.

Two layouts are available.  ``ladder`` places left/right pairs of long,
obliquely oriented cuboids at descending heights, labeled top to bottom and
right before left like a rib cage.  ``stack`` places one column of compact
cuboids along z, each with a small pitch, like a spine.

Voxels are labeled when their center lies inside the generating box, so
every foreground voxel is contained in its box by construction.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .geometry import (
    Pose9DoF,
    box_corners,
    canonical_box_frame,
    contains,
    euler_to_matrix,
    matrix_to_euler,
    normalize_target,
)
from .matching import Prediction
from .rng import OP_PERTURB, OP_SCENE, make_rng
from .volume import LabelVolume, VolumeMeta, continuous_voxel_to_world, world_to_voxel

LADDER_BOX = (80.0, 20.0, 10.0)
LADDER_PITCH = 20.0
LADDER_OFFSET = 50.0
LADDER_ANGLES = (30.0, 10.0, 0.0)
STACK_BOX = (40.0, 30.0, 16.0)
STACK_PITCH = 24.0
MARGIN_MM = 16.0


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    instance_count: int = 24
    layout: str = "ladder"
    dims: Optional[tuple[int, int, int]] = None
    spacing: tuple[float, float, float] = (2.0, 2.0, 2.0)
    translation_jitter: float = 3.0
    scale_jitter: float = 0.05
    rotation_jitter: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.instance_count < 1:
            raise SynthError("instance_count must be >= 1")
        if self.layout not in ("ladder", "stack"):
            raise SynthError(f"unknown layout {self.layout!r}")
        if min(self.translation_jitter, self.scale_jitter, self.rotation_jitter) < 0:
            raise SynthError("jitter magnitudes must be >= 0")
        if self.scale_jitter >= 1:
            raise SynthError("scale_jitter must be < 1")


@dataclass(frozen=True, eq=False)
class Scene:
    gt_poses: list
    labels: LabelVolume
    config: SceneConfig = field(default_factory=SceneConfig)

    @property
    def meta(self) -> VolumeMeta:
        return self.labels.meta

    def pose(self, label: int) -> Pose9DoF:
        for p in self.gt_poses:
            if p.label == label:
                return p
        raise KeyError(label)


def canonical_layout(count: int, layout: str) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Un-jittered (center, scale, angles) per label 1..count, centered on the world origin."""
    out = []
    if layout == "ladder":
        levels = (count + 1) // 2
        top = (levels - 1) * LADDER_PITCH / 2.0
        a, b, g = LADDER_ANGLES
        for i in range(count):
            level, side = divmod(i, 2)
            sign = -1.0 if side == 0 else 1.0  # right side first
            center = np.array([sign * LADDER_OFFSET, 0.0, top - level * LADDER_PITCH])
            angles = np.array([-sign * a, sign * b, g])
            out.append((center, np.array(LADDER_BOX), angles))
    else:
        top = (count - 1) * STACK_PITCH / 2.0
        for i in range(count):
            out.append((np.array([0.0, 0.0, top - i * STACK_PITCH]), np.array(STACK_BOX), np.zeros(3)))
    return out


def _auto_dims(boxes: Sequence[Pose9DoF], spacing) -> tuple[tuple[int, int, int], np.ndarray]:
    corners = np.concatenate([box_corners(b) for b in boxes])
    lo = corners.min(axis=0) - MARGIN_MM
    hi = corners.max(axis=0) + MARGIN_MM
    dims = np.ceil((hi - lo) / np.asarray(spacing)).astype(int) + 1
    return tuple(int(d) for d in dims), lo


def jittered_poses(config: SceneConfig) -> list[Pose9DoF]:
    """Generating boxes (world mm, origin-centered), canonical frame convention."""
    rng = make_rng(config.seed, 0, OP_SCENE)
    poses = []
    for label, (center, scale, angles) in enumerate(canonical_layout(config.instance_count, config.layout), 1):
        t = rng.uniform(-1.0, 1.0, 3) * config.translation_jitter
        s = 1.0 + rng.uniform(-1.0, 1.0, 3) * config.scale_jitter
        r = rng.uniform(-1.0, 1.0, 3) * config.rotation_jitter
        if config.layout == "stack":
            r = np.array([0.0, 0.0, r[2]])
        frame, scale = canonical_box_frame(euler_to_matrix(angles + r), scale * s)
        poses.append(Pose9DoF(label, center + t, scale, matrix_to_euler(frame)))
    return poses


def rasterize(poses: Iterable[Pose9DoF], meta: VolumeMeta) -> LabelVolume:
    """Label voxels whose centers fall in a box; lower labels win overlaps."""
    vox = np.zeros(meta.dims, dtype=np.uint16)
    dims = np.asarray(meta.dims)
    for pose in sorted(poses, key=lambda p: p.label):
        idx = world_to_voxel(meta, box_corners(pose))
        lo = np.clip(np.floor(idx.min(axis=0)).astype(int), 0, dims - 1)
        hi = np.clip(np.ceil(idx.max(axis=0)).astype(int), 0, dims - 1)
        grid = np.indices(hi - lo + 1).reshape(3, -1).T + lo
        inside = contains(pose, continuous_voxel_to_world(meta, grid), tol=0.0)
        sel = grid[inside]
        free = vox[sel[:, 0], sel[:, 1], sel[:, 2]] == 0
        sel = sel[free]
        vox[sel[:, 0], sel[:, 1], sel[:, 2]] = pose.label
    return LabelVolume(meta, vox)


def gen_scene(config: SceneConfig = SceneConfig()) -> Scene:
    """Build and rasterize a scene; identical configs give bit-identical scenes."""
    poses = jittered_poses(config)
    spacing = tuple(float(s) for s in config.spacing)
    if config.dims is None:
        # size the grid from the jitter-free layout so every seed shares one grid
        canon = [Pose9DoF(i, c, s * (1 + config.scale_jitter), a)
                 for i, (c, s, a) in enumerate(canonical_layout(config.instance_count, config.layout), 1)]
        dims, _ = _auto_dims(canon, spacing)
        pad = config.translation_jitter + 0.5 * max(LADDER_BOX) * np.radians(config.rotation_jitter) * 2
        dims = tuple(int(d + 2 * np.ceil(pad / sp)) for d, sp in zip(dims, spacing))
    else:
        dims = tuple(int(d) for d in config.dims)
    extent = np.asarray(dims, float) * np.asarray(spacing)
    origin = -(np.asarray(dims, float) - 1.0) / 2.0 * np.asarray(spacing)
    meta = VolumeMeta(dims, spacing, tuple(origin), np.eye(3))
    lo, hi = origin - np.asarray(spacing) / 2, origin - np.asarray(spacing) / 2 + extent
    for p in poses:
        c = box_corners(p)
        if np.any(c < lo) or np.any(c > hi):
            raise SynthError(f"box {p.label} exceeds the volume bounds at the requested jitter")
    labels = rasterize(poses, meta)
    present = set(labels.labels())
    lost = [p.label for p in poses if p.label not in present]
    if lost:
        raise SynthError(f"instances {lost} rasterized to no voxels; spacing too coarse")
    return Scene(poses, labels, config)


def perturb_predictions(gt_poses: Sequence[Pose9DoF], meta: VolumeMeta, noise=(0.0, 0.0, 0.0),
                        drop: Iterable[int] = (), seed: int = 0, num_classes: Optional[int] = None,
                        case: int = 0) -> list[Prediction]:
    """Gaussian-perturbed predictions, one per kept GT, certain of the true class.

    ``noise`` is (sigma position mm, sigma scale mm, sigma angle deg).
    """
    sp, ss, sa = (float(v) for v in noise)
    if min(sp, ss, sa) < 0:
        raise ValueError("noise sigmas must be >= 0")
    drop = {int(d) for d in drop}
    if num_classes is None:
        num_classes = max(p.label for p in gt_poses)
    rng = make_rng(seed, case, OP_PERTURB)
    out = []
    for pose in sorted(gt_poses, key=lambda p: p.label):
        # draw for every GT so dropping one does not shift the others' noise
        e = rng.standard_normal(9)
        if pose.label in drop:
            continue
        scale = np.maximum(pose.scale + ss * e[3:6], 1e-3)
        noisy = Pose9DoF(pose.label, pose.center + sp * e[0:3], scale, pose.angles + sa * e[6:9])
        probs = np.zeros(num_classes + 1)
        probs[pose.label] = 1.0
        out.append(Prediction(pose.label, probs, normalize_target(noisy, meta, clip=True)))
    return out
