"""A featureless steerable detector.

Every query owns a constant prediction: class logits plus nine
pre-sigmoid box parameters.  Training alternates Hungarian matching (with
the index cost) and one gradient step on the set loss, which is enough to
watch queries bind to anatomy labels, or fail to.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.special import expit, logit, softmax

from .geometry import Pose9DoF, denormalize_target, normalize_target
from .loss import loss_gradients, predictions_from_params
from .matching import (
    CostCoeffs,
    GroundTruth,
    MatchAssignment,
    Prediction,
    assignment_cost,
    build_index_cost,
    cost_matrix_arrays,
    hungarian,
    steer,
)
from .rng import OP_INIT, make_rng
from .synth import Scene
from .volume import VolumeMeta

log = logging.getLogger(__name__)

# box targets are kept strictly inside (0, 1) so the logit stays finite
_EDGE = 1e-9


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, history):
        super().__init__(msg)
        self.history = history


class NotSteerable(RuntimeError):
    pass


@dataclass
class QueryBank:
    logits: np.ndarray
    box_raw: np.ndarray
    binding: Optional[dict] = None  # query index -> label from the last matching

    @property
    def num_queries(self) -> int:
        return len(self.logits)

    @property
    def num_classes(self) -> int:
        return self.logits.shape[1] - 1

    def predictions(self) -> list[Prediction]:
        return predictions_from_params(self.logits, self.box_raw)

    def decode(self, query: int) -> Prediction:
        r = query - 1
        return Prediction(query, softmax(self.logits[r]), expit(self.box_raw[r]))

    def to_json(self) -> dict:
        return {
            "num_queries": self.num_queries,
            "num_classes": self.num_classes,
            "logits": self.logits.tolist(),
            "box_raw": self.box_raw.tolist(),
            "binding": None if self.binding is None else {str(k): v for k, v in sorted(self.binding.items())},
        }

    @classmethod
    def from_json(cls, d: dict) -> "QueryBank":
        binding = d.get("binding")
        if binding is not None:
            binding = {int(k): int(v) for k, v in binding.items()}
        return cls(np.asarray(d["logits"], float), np.asarray(d["box_raw"], float), binding)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path) -> "QueryBank":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


@dataclass
class TrainConfig:
    dataset: list
    epochs: int = 2000
    lr: float = 0.05
    coeffs: CostCoeffs = field(default_factory=CostCoeffs)
    seed: int = 0
    init_scale: float = 0.003
    background_weight: float = 1.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if not self.dataset:
            raise ValueError("empty dataset")


@dataclass
class EpochRecord:
    epoch: int
    total: float
    classification: float
    position: float
    scale: float
    angle: float
    binding: tuple  # label -> query for labels 1..C (0 where the label is absent)


def scene_targets(scene: Scene, meta: Optional[VolumeMeta] = None) -> list[GroundTruth]:
    meta = scene.meta if meta is None else meta
    return [GroundTruth(p.label, normalize_target(p, meta)) for p in sorted(scene.gt_poses, key=lambda p: p.label)]


def init_bank(num_classes: int, seed: int = 0, init_scale: float = 0.003) -> QueryBank:
    """Q = C queries near uniform class scores and the image center."""
    rng = make_rng(seed, 0, OP_INIT)
    logits = rng.normal(0.0, init_scale, (num_classes, num_classes + 1))
    box_raw = rng.normal(0.0, init_scale, (num_classes, 9))
    return QueryBank(logits, box_raw)


def _match_arrays(probs, boxes, gts, coeffs, index_cost):
    queries = np.arange(1, len(probs) + 1)
    labels = np.array([g.label for g in gts], dtype=int)
    targets = np.stack([g.target for g in gts]) if gts else np.zeros((0, 9))
    cost = cost_matrix_arrays(probs, boxes, queries, labels, targets, coeffs, index_cost)
    cols = hungarian(cost)
    return MatchAssignment(tuple(int(c) for c in cols), tuple(int(c) + 1 for c in cols), assignment_cost(cost, cols))


def _kink_limited_step(box_raw, step, targets):
    """Apply ``box_raw + step`` but stop at the first L1 kink crossed.

    ``targets`` is (S, Q, 9) in sigmoid space with NaN where a query is
    unmatched.  Stopping at kinks keeps every step a descent step for the
    piecewise-linear box terms.
    """
    s0 = expit(box_raw)
    new = box_raw + step
    s1 = expit(new)
    lo, hi = np.minimum(s0, s1), np.maximum(s0, s1)
    with np.errstate(invalid="ignore"):
        crossing = (targets > lo) & (targets < hi)
    dist = np.where(crossing, np.abs(targets - s0), np.inf)
    nearest = np.argmin(dist, axis=0)
    hit = np.isfinite(np.min(dist, axis=0))
    if hit.any():
        t = np.take_along_axis(targets, nearest[None], axis=0)[0]
        new = np.where(hit, logit(np.clip(t, _EDGE, 1 - _EDGE)), new)
    return new


def train_toy(config: TrainConfig, bank: Optional[QueryBank] = None):
    """Fit a query bank to a list of scenes.

    Every epoch re-matches each scene, then takes one gradient step on the
    scene-averaged set loss.  Returns ``(bank, history)``; the history holds
    one :class:`EpochRecord` per epoch, computed before that epoch's step.
    """
    scenes = config.dataset
    num_classes = max(p.label for s in scenes for p in s.gt_poses)
    if bank is None:
        bank = init_bank(num_classes, config.seed, config.init_scale)
    elif bank.num_classes != num_classes:
        raise ValueError("bank class count does not match the dataset")
    coeffs = config.coeffs
    index_cost = build_index_cost(bank.num_queries)
    gts_per_scene = [scene_targets(s) for s in scenes]
    logits, box_raw = bank.logits.copy(), bank.box_raw.copy()
    history: list[EpochRecord] = []
    n_scenes = len(scenes)
    assignments: list[MatchAssignment] = []

    for epoch in range(config.epochs):
        probs = softmax(logits, axis=1)
        boxes = expit(box_raw)
        g_logits = np.zeros_like(logits)
        g_box = np.zeros_like(box_raw)
        totals = np.zeros(5)
        targets = np.full((n_scenes,) + box_raw.shape, np.nan)
        assignments = []
        for si, gts in enumerate(gts_per_scene):
            asg = _match_arrays(probs, boxes, gts, coeffs, index_cost)
            assignments.append(asg)
            br, dl, db = loss_gradients(logits, box_raw, gts, asg, coeffs, config.background_weight, per_gt=False)
            g_logits += dl
            g_box += db
            totals += (br.total, br.classification, br.position, br.scale, br.angle)
            for gt, col in zip(gts, asg.columns):
                targets[si, col] = gt.target
        totals /= n_scenes
        binding = [0] * num_classes
        for gt, q in zip(gts_per_scene[0], assignments[0].queries):
            binding[gt.label - 1] = q
        history.append(EpochRecord(epoch, *(float(v) for v in totals), tuple(binding)))
        if not np.all(np.isfinite(totals)):
            raise TrainingDiverged(f"loss became non-finite at epoch {epoch}", history)
        logits = logits - config.lr * g_logits / n_scenes
        box_raw = _kink_limited_step(box_raw, -config.lr * g_box / n_scenes, targets)

    final = QueryBank(logits, box_raw)
    final.binding = binding_permutation(final, scenes[0], coeffs)
    return final, history


def binding_permutation(bank: QueryBank, scene: Scene, coeffs: CostCoeffs = CostCoeffs()) -> dict[int, int]:
    """Query index -> label under the optimal matching against ``scene``."""
    gts = scene_targets(scene)
    probs = softmax(bank.logits, axis=1)
    boxes = expit(bank.box_raw)
    asg = _match_arrays(probs, boxes, gts, coeffs, build_index_cost(bank.num_queries))
    return {q: gt.label for gt, q in zip(gts, asg.queries)}


def is_identity(binding: dict) -> bool:
    return bool(binding) and all(q == lab for q, lab in binding.items())


def displacement(binding: dict) -> int:
    """Sum of |query - label| over a binding."""
    return int(sum(abs(q - lab) for q, lab in binding.items()))


@dataclass
class WorkCounter:
    decoded: int = 0


def steerable_infer(bank: QueryBank, requested: Iterable[int], meta: VolumeMeta,
                    counter: Optional[WorkCounter] = None) -> list[Pose9DoF]:
    """Decode only the queries of the requested labels into world boxes."""
    if bank.binding is None or not is_identity(bank.binding) or len(bank.binding) != bank.num_queries:
        raise NotSteerable("query bank is not identity-bound; steering by label is not established")
    wanted = sorted({int(r) for r in requested})
    bad = [r for r in wanted if not 1 <= r <= bank.num_classes]
    if bad:
        raise ValueError(f"unknown label(s) {bad}; valid range is 1..{bank.num_classes}")
    preds = [bank.decode(q) for q in wanted]
    if counter is not None:
        counter.decoded += len(preds)
    preds = steer(preds, wanted, bank.num_classes)
    return [denormalize_target(p.target, meta, p.query_index) for p in preds]


def write_history_csv(history: Sequence[EpochRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "total", "classification", "position", "scale", "angle", "binding"])
        for h in history:
            w.writerow([h.epoch, repr(h.total), repr(h.classification), repr(h.position), repr(h.scale),
                        repr(h.angle), " ".join(str(q) for q in h.binding)])
