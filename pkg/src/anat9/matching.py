"""Query/ground-truth matching with an index cost.

Each prediction comes from a query with a fixed index.  The pair cost adds
``lambda_m * M[query, label]`` to the usual classification and L1 box terms,
where ``M`` grows with the gap between the query index and the class label.
That extra term nudges query ``q`` towards anatomy ``q`` during matching
only; it never enters the training loss.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np


class MatchingError(ValueError):
    pass


@dataclass(frozen=True)
class CostCoeffs:
    cls: float = 1.0
    pos: float = 10.0
    scale: float = 10.0
    angle: float = 10.0
    index: float = 4.0

    def __post_init__(self):
        for name in ("cls", "pos", "scale", "angle", "index"):
            if getattr(self, name) < 0:
                raise MatchingError(f"coefficient {name} must be >= 0")

    def with_index(self, value: float) -> "CostCoeffs":
        return CostCoeffs(self.cls, self.pos, self.scale, self.angle, value)

    def to_json(self) -> dict:
        return {"cls": self.cls, "pos": self.pos, "scale": self.scale, "angle": self.angle, "index": self.index}


@dataclass(frozen=True, eq=False)
class Prediction:
    """One query's output: class probabilities (channel 0 = background) and a normalized 9-vector."""

    query_index: int
    class_probs: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        probs = np.array(self.class_probs, dtype=float).ravel()
        target = np.array(self.target, dtype=float).reshape(9)
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
            raise MatchingError("class_probs must be a probability vector")
        if self.query_index < 1:
            raise MatchingError("query indices start at 1")
        object.__setattr__(self, "query_index", int(self.query_index))
        object.__setattr__(self, "class_probs", probs)
        object.__setattr__(self, "target", target)

    @property
    def num_classes(self) -> int:
        return len(self.class_probs) - 1


class GroundTruth(NamedTuple):
    label: int
    target: np.ndarray


@dataclass(frozen=True)
class MatchAssignment:
    """GT ``i`` is matched to ``preds[columns[i]]`` whose query index is ``queries[i]``."""

    columns: tuple[int, ...]
    queries: tuple[int, ...]
    total_cost: float

    def as_dict(self) -> dict[int, int]:
        return dict(enumerate(self.queries))


def build_index_cost(num_queries: int) -> np.ndarray:
    """(Q+1) x (Q+1) ramp ``M[q, c] = |q - c| / Q``; row 0 / column 0 are background."""
    if num_queries < 1:
        raise MatchingError("need at least one query")
    idx = np.arange(num_queries + 1, dtype=float)
    return np.abs(idx[:, None] - idx[None, :]) / num_queries


def pair_cost(pred: Prediction, gt: GroundTruth, coeffs: CostCoeffs, index_cost: np.ndarray) -> float:
    label = int(gt.label)
    if not 1 <= label <= pred.num_classes:
        raise MatchingError(f"label {label} outside 1..{pred.num_classes}")
    d = np.abs(pred.target - np.asarray(gt.target, float))
    return float(
        -coeffs.cls * pred.class_probs[label]
        + coeffs.pos * d[0:3].sum()
        + coeffs.scale * d[3:6].sum()
        + coeffs.angle * d[6:9].sum()
        + coeffs.index * index_cost[pred.query_index, label]
    )


def cost_matrix(preds: Sequence[Prediction], gts: Sequence[GroundTruth], coeffs: CostCoeffs,
                index_cost: np.ndarray) -> np.ndarray:
    """N x Q matrix of pair costs, rows = ground truths, columns = predictions."""
    if not preds or not gts:
        return np.zeros((len(gts), len(preds)))
    probs = np.stack([p.class_probs for p in preds])
    boxes = np.stack([p.target for p in preds])
    queries = np.array([p.query_index for p in preds])
    labels = np.array([int(g.label) for g in gts], dtype=int)
    targets = np.stack([np.asarray(g.target, float) for g in gts])
    return cost_matrix_arrays(probs, boxes, queries, labels, targets, coeffs, index_cost)


def cost_matrix_arrays(probs, boxes, queries, labels, targets, coeffs: CostCoeffs, index_cost) -> np.ndarray:
    """Array form of :func:`cost_matrix` (probs Qx(C+1), boxes Qx9, targets Nx9)."""
    labels = np.asarray(labels, dtype=int)
    if labels.size and (labels.min() < 1 or labels.max() >= probs.shape[1]):
        raise MatchingError("ground-truth label outside the class range")
    d = np.abs(targets[:, None, :] - boxes[None, :, :])
    return (
        -coeffs.cls * probs[:, labels].T
        + coeffs.pos * d[..., 0:3].sum(-1)
        + coeffs.scale * d[..., 3:6].sum(-1)
        + coeffs.angle * d[..., 6:9].sum(-1)
        + coeffs.index * index_cost[np.ix_(queries, labels)].T
    )


def hungarian(cost) -> np.ndarray:
    """Minimum-cost injective assignment of the rows of an N x Q matrix (N <= Q).

    Shortest augmenting path with dual potentials, O(N^2 Q).  Returns the
    column chosen for every row.  Ties go to the lowest column index.
    """
    a = np.asarray(cost, dtype=float)
    if a.ndim != 2:
        raise MatchingError("cost must be a 2-D matrix")
    n, m = a.shape
    if n > m:
        raise MatchingError(f"more ground truths ({n}) than queries ({m})")
    if not np.all(np.isfinite(a)):
        raise MatchingError("cost matrix has non-finite entries")
    if n == 0:
        return np.zeros(0, dtype=int)

    # plain lists beat numpy at the sizes seen here (tens of queries)
    rows = a.tolist()
    inf = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    p = [0] * (m + 1)  # p[j]: 1-based row holding column j
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = rows[i0 - 1]
            ui = u[i0]
            delta = inf
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = row[j - 1] - ui - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1

    out = np.full(n, -1, dtype=int)
    for j in range(1, m + 1):
        if p[j]:
            out[p[j] - 1] = j - 1
    return out


def assignment_cost(cost, columns) -> float:
    a = np.asarray(cost, dtype=float)
    return math.fsum(a[i, c] for i, c in enumerate(columns))


def match(preds: Sequence[Prediction], gts: Sequence[GroundTruth], coeffs: CostCoeffs,
          index_cost: np.ndarray) -> MatchAssignment:
    """Optimal GT -> query assignment; unmatched queries count as background."""
    cost = cost_matrix(preds, gts, coeffs, index_cost)
    cols = hungarian(cost)
    queries = tuple(preds[c].query_index for c in cols)
    return MatchAssignment(tuple(int(c) for c in cols), queries, assignment_cost(cost, cols))


def steer(preds: Sequence[Prediction], requested: Iterable[int], num_classes: int | None = None) -> list[Prediction]:
    """Keep only the predictions of the requested query indices, in ascending order."""
    if num_classes is None:
        if not preds:
            raise MatchingError("cannot infer the class count from an empty bank")
        num_classes = preds[0].num_classes
    wanted = sorted({int(r) for r in requested})
    bad = [r for r in wanted if not 1 <= r <= num_classes]
    if bad:
        raise MatchingError(f"unknown label(s) {bad}; valid range is 1..{num_classes}")
    by_query = {p.query_index: p for p in preds}
    missing = [r for r in wanted if r not in by_query]
    if missing:
        raise MatchingError(f"no query bound to label(s) {missing}")
    return [by_query[r] for r in wanted]


def write_cost_csv(cost: np.ndarray, path, queries: Sequence[int] | None = None) -> None:
    """Dump a cost matrix for debugging; header row holds query indices."""
    cost = np.asarray(cost)
    if queries is None:
        queries = range(1, cost.shape[1] + 1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["gt"] + [f"q{q}" for q in queries])
        for i, row in enumerate(cost):
            w.writerow([i] + [repr(float(x)) for x in row])


def decode_predictions(preds: Sequence[Prediction], meta, labels: str = "query") -> list:
    """World-space boxes for predictions.

    ``labels="query"`` labels each box with its query index; ``"argmax"``
    uses the most probable foreground class and skips background winners.
    """
    from .geometry import denormalize_target

    out = []
    for p in preds:
        if labels == "query":
            label = p.query_index
        else:
            label = int(np.argmax(p.class_probs))
            if label == 0:
                continue
        out.append(denormalize_target(p.target, meta, label))
    return out
