"""Box identification rate and segmentation overlap / surface metrics."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .geometry import Pose9DoF
from .volume import LabelVolume


class UndefinedMetric(ValueError):
    """Surface distances are undefined when either mask is empty."""


@dataclass(frozen=True)
class IdThresholds:
    position: float = 20.0
    scale: float = 20.0
    angle: float = 10.0

    def __post_init__(self):
        if min(self.position, self.scale, self.angle) <= 0:
            raise ValueError("identification thresholds must be positive")


def angle_deviation(a, b):
    """Per-axis wrapped angle difference in degrees, in [0, 180]."""
    d = np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)) % 360.0
    return np.minimum(d, 360.0 - d)


@dataclass
class GTOutcome:
    label: int
    identified: bool
    d_position: Optional[float] = None
    d_scale: Optional[float] = None
    d_angle: Optional[float] = None


@dataclass
class DetectionReport:
    outcomes: list
    n: int
    m: int
    r: int
    id_rate: float
    p_mean: Optional[float]
    s_mean: Optional[float]
    a_mean: Optional[float]

    @property
    def identified(self) -> list[bool]:
        return [o.identified for o in self.outcomes]

    def to_json(self) -> dict:
        return asdict(self)


def identify(preds: Sequence[Pose9DoF], gts: Sequence[Pose9DoF], thresholds: IdThresholds = IdThresholds(),
             wrap_angles: bool = True) -> DetectionReport:
    """Identification of each ground-truth box.

    GT ``i`` counts as identified when the prediction carrying its label is
    the closest prediction to it (center distance) and the center distance,
    mean absolute scale difference and mean absolute angle difference are
    all strictly below their thresholds.  Mean deviations are taken over the
    identified boxes only.
    """
    if not gts:
        raise ValueError("no ground-truth boxes to evaluate")
    centers = np.array([p.center for p in preds]).reshape(-1, 3)
    labels = np.array([p.label for p in preds], dtype=int)
    outcomes = []
    for gt in gts:
        if len(preds) == 0:
            outcomes.append(GTOutcome(gt.label, False))
            continue
        dist = np.linalg.norm(centers - gt.center, axis=1)
        same = np.flatnonzero(labels == gt.label)
        if len(same) == 0:
            outcomes.append(GTOutcome(gt.label, False))
            continue
        # nearest same-label prediction; order-independent tie break on the box vector
        best = min(same, key=lambda j: (dist[j], tuple(preds[j].as_vector())))
        pred = preds[best]
        dp = float(dist[best])
        ds = float(np.mean(np.abs(pred.scale - gt.scale)))
        if wrap_angles:
            da = float(np.mean(angle_deviation(pred.angles, gt.angles)))
        else:
            da = float(np.mean(np.abs(pred.angles - gt.angles)))
        ok = (
            dp <= dist.min()
            and dp < thresholds.position
            and ds < thresholds.scale
            and da < thresholds.angle
        )
        outcomes.append(GTOutcome(gt.label, bool(ok), dp, ds, da))
    hits = [o for o in outcomes if o.identified]
    r = len(hits)

    def _mean(key):
        return float(np.mean([getattr(o, key) for o in hits])) if hits else None

    return DetectionReport(outcomes, len(gts), len(preds), r, r / len(gts),
                           _mean("d_position"), _mean("d_scale"), _mean("d_angle"))


# --------------------------------------------------------------------------
# segmentation


def dice(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"grid mismatch: {a.shape} vs {b.shape}")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


_SIX = ndimage.generate_binary_structure(3, 1)


def border(mask) -> np.ndarray:
    """Foreground voxels with at least one 6-neighbour outside the mask (grid edge counts as outside)."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_SIX, border_value=0)


def directed_surface_distances(a, b, spacing) -> np.ndarray:
    """Distance (mm) from every border voxel of ``a`` to the nearest border voxel of ``b``."""
    ba, bb = border(a), border(b)
    edt = ndimage.distance_transform_edt(~bb, sampling=spacing)
    return edt[ba]


def surface_metrics(a, b, spacing=(1.0, 1.0, 1.0), percentile: float = 95.0):
    """(HD at ``percentile``, ASSD) in mm between two non-empty masks.

    ``percentile=100`` gives the plain Hausdorff distance.  Percentiles
    interpolate linearly between order statistics.
    """
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"grid mismatch: {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        raise UndefinedMetric("surface distance undefined for an empty mask")
    d_ab = directed_surface_distances(a, b, spacing)
    d_ba = directed_surface_distances(b, a, spacing)
    hd = max(float(np.percentile(d_ab, percentile)), float(np.percentile(d_ba, percentile)))
    assd = float(np.concatenate([d_ab, d_ba]).mean())
    return hd, assd


@dataclass
class InstanceSeg:
    label: int
    dsc: float
    hd: Optional[float]
    assd: Optional[float]
    missing: bool


@dataclass
class SegReport:
    instances: list
    mean_dsc: float
    mean_hd: Optional[float]
    mean_assd: Optional[float]
    missing: list = field(default_factory=list)
    percentile: float = 95.0

    def to_json(self) -> dict:
        return asdict(self)


def _joint_crop(a: np.ndarray, b: np.ndarray):
    """Cut both masks to their joint bounding box plus one empty voxel of padding.

    Borders and border-to-border distances are unchanged by this.
    """
    idx = np.argwhere(a | b)
    lo = idx.min(axis=0)
    hi = idx.max(axis=0) + 1
    sl = tuple(slice(i, j) for i, j in zip(lo, hi))
    return np.pad(a[sl], 1), np.pad(b[sl], 1)


def evaluate_segmentation(gt: LabelVolume, pred: LabelVolume, labels: Optional[Sequence[int]] = None,
                          percentile: float = 95.0) -> SegReport:
    """Per-instance DSC / HD / ASSD for every ground-truth label.

    Instances absent from the prediction score DSC 0 and are left out of the
    distance averages.
    """
    if gt.meta.dims != pred.meta.dims:
        raise ValueError(f"grid mismatch: {gt.meta.dims} vs {pred.meta.dims}")
    if labels is None:
        labels = gt.labels()
    rows = []
    for lab in labels:
        g = gt.voxels == lab
        p = pred.voxels == lab
        d = dice(g, p)
        if not p.any() or not g.any():
            rows.append(InstanceSeg(int(lab), d, None, None, True))
            continue
        g, p = _joint_crop(g, p)
        hd, assd = surface_metrics(g, p, gt.meta.spacing, percentile)
        rows.append(InstanceSeg(int(lab), d, hd, assd, False))
    present = [r for r in rows if not r.missing]
    mean_dsc = float(np.mean([r.dsc for r in rows])) if rows else math.nan
    mean_hd = float(np.mean([r.hd for r in present])) if present else None
    mean_assd = float(np.mean([r.assd for r in present])) if present else None
    return SegReport(rows, mean_dsc, mean_hd, mean_assd, [r.label for r in rows if r.missing], percentile)


CSV_FIELDS = ("case", "label", "identified", "dP", "dS", "dA", "dsc", "hd95", "assd")


def report_rows(case: str, det: Optional[DetectionReport] = None, seg: Optional[SegReport] = None) -> list[dict]:
    """Merge detection and segmentation outcomes into one row per label."""
    rows: dict[int, dict] = {}

    def row(label):
        return rows.setdefault(label, {k: "" for k in CSV_FIELDS} | {"case": case, "label": label})

    if det is not None:
        for o in det.outcomes:
            r = row(o.label)
            r["identified"] = int(o.identified)
            for key, attr in (("dP", "d_position"), ("dS", "d_scale"), ("dA", "d_angle")):
                v = getattr(o, attr)
                r[key] = "" if v is None else repr(v)
    if seg is not None:
        for s in seg.instances:
            r = row(s.label)
            r["dsc"] = repr(s.dsc)
            r["hd95"] = "" if s.hd is None else repr(s.hd)
            r["assd"] = "" if s.assd is None else repr(s.assd)
    return [rows[k] for k in sorted(rows)]


def write_rows_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        w.writerows(rows)
