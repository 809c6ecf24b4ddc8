"""Set-prediction loss over a fixed assignment, with analytic gradients.

Matched queries pay cross-entropy on their ground-truth class plus weighted
L1 distances on the normalized position, scale and angle components.
Unmatched queries pay cross-entropy on the background channel only.  All
terms are divided by the number of ground truths.  The index-cost weight is
deliberately not used here.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit, log_softmax, softmax

from .matching import CostCoeffs, GroundTruth, MatchAssignment, Prediction

PROB_FLOOR = 1e-12
# |difference| at or below this is treated as sitting on the L1 kink
KINK_TOL = 1e-12

_SLICES = {"position": slice(0, 3), "scale": slice(3, 6), "angle": slice(6, 9)}


@dataclass
class LossBreakdown:
    """Unweighted per-term means; ``total`` is their coefficient-weighted sum."""

    total: float
    classification: float
    position: float
    scale: float
    angle: float
    per_gt: list = field(default_factory=list)
    clamped: bool = False

    def to_json(self) -> dict:
        return asdict(self)


def _check(num_preds: int, gts: Sequence[GroundTruth], assignment: MatchAssignment) -> None:
    if len(assignment.columns) != len(gts):
        raise ValueError("assignment does not cover every ground truth")
    cols = list(assignment.columns)
    if len(set(cols)) != len(cols) or any(c < 0 or c >= num_preds for c in cols):
        raise ValueError("assignment is not an injective map into the predictions")


def _sign(d: np.ndarray) -> np.ndarray:
    return np.where(np.abs(d) <= KINK_TOL, 0.0, np.sign(d))


def _breakdown(neg_log_p: np.ndarray, boxes: np.ndarray, gts, assignment, coeffs, background_weight,
               clamped, per_gt: bool = True) -> LossBreakdown:
    n = len(gts)
    norm = max(n, 1)
    cols = np.asarray(assignment.columns, dtype=int)
    labels = np.array([int(g.label) for g in gts], dtype=int)
    matched = np.zeros(len(neg_log_p), dtype=bool)
    matched[cols] = True
    if n:
        targets = np.stack([np.asarray(g.target, float) for g in gts])
        d = np.abs(boxes[cols] - targets)
        ce = neg_log_p[cols, labels]
    else:
        d = np.zeros((0, 9))
        ce = np.zeros(0)
    sums = {k: d[:, s].sum(axis=1) for k, s in _SLICES.items()}
    background = float(neg_log_p[~matched, 0].sum()) * background_weight
    classification = (float(ce.sum()) + background) / norm
    position, scale, angle = (float(sums[k].sum()) / norm for k in ("position", "scale", "angle"))
    total = coeffs.cls * classification + coeffs.pos * position + coeffs.scale * scale + coeffs.angle * angle
    rows = []
    if per_gt:
        for i in range(n):
            rows.append({"gt": i, "label": int(labels[i]), "query": int(assignment.queries[i]),
                         "classification": float(ce[i]), "position": float(sums["position"][i]),
                         "scale": float(sums["scale"][i]), "angle": float(sums["angle"][i])})
    return LossBreakdown(float(total), classification, position, scale, angle, rows, clamped)


def set_loss(preds: Sequence[Prediction], gts: Sequence[GroundTruth], assignment: MatchAssignment,
             coeffs: CostCoeffs, background_weight: float = 1.0) -> LossBreakdown:
    """Loss of ``preds`` against ``gts`` under a given assignment."""
    _check(len(preds), gts, assignment)
    probs = np.stack([p.class_probs for p in preds])
    boxes = np.stack([p.target for p in preds])
    clamped = bool(np.any(probs < PROB_FLOOR))
    neg_log_p = -np.log(np.maximum(probs, PROB_FLOOR))
    return _breakdown(neg_log_p, boxes, gts, assignment, coeffs, background_weight, clamped)


def predictions_from_params(logits: np.ndarray, box_raw: np.ndarray, query_indices=None) -> list[Prediction]:
    """Softmax the class logits and squash the box parameters into [0, 1]."""
    logits = np.asarray(logits, dtype=float)
    box_raw = np.asarray(box_raw, dtype=float)
    if query_indices is None:
        query_indices = range(1, len(logits) + 1)
    probs = softmax(logits, axis=1)
    boxes = expit(box_raw)
    return [Prediction(q, probs[r], boxes[r]) for r, q in enumerate(query_indices)]


def loss_gradients(logits: np.ndarray, box_raw: np.ndarray, gts: Sequence[GroundTruth],
                   assignment: MatchAssignment, coeffs: CostCoeffs, background_weight: float = 1.0,
                   per_gt: bool = True):
    """Loss and its gradient w.r.t. class logits and pre-sigmoid box parameters.

    The assignment is held fixed.  Returns ``(breakdown, d_logits, d_box_raw)``.
    """
    logits = np.asarray(logits, dtype=float)
    box_raw = np.asarray(box_raw, dtype=float)
    _check(len(logits), gts, assignment)
    norm = max(len(gts), 1)
    log_p = log_softmax(logits, axis=1)
    probs = np.exp(log_p)
    boxes = expit(box_raw)
    neg_log_p = np.minimum(-log_p, -np.log(PROB_FLOOR))
    clamped = bool(np.any(-log_p > -np.log(PROB_FLOOR)))
    breakdown = _breakdown(neg_log_p, boxes, gts, assignment, coeffs, background_weight, clamped, per_gt)

    cols = np.asarray(assignment.columns, dtype=int)
    labels = np.array([int(g.label) for g in gts], dtype=int)
    onehot = np.zeros_like(logits)
    onehot[:, 0] = 1.0
    weight = np.full(len(logits), float(background_weight))
    d_box = np.zeros_like(box_raw)
    if len(cols):
        onehot[cols] = 0.0
        onehot[cols, labels] = 1.0
        weight[cols] = 1.0
        targets = np.stack([np.asarray(g.target, float) for g in gts])
        box_coeff = np.repeat([coeffs.pos, coeffs.scale, coeffs.angle], 3)
        diff = boxes[cols] - targets
        d_box[cols] = box_coeff * _sign(diff) * boxes[cols] * (1.0 - boxes[cols])
    d_logits = coeffs.cls * weight[:, None] * (probs - onehot) / norm
    return breakdown, d_logits, d_box / norm
