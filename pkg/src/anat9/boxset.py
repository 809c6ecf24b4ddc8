"""Box-set JSON: image metadata plus a list of 9-DoF boxes."""
from __future__ import annotations

import json
from typing import Optional, Sequence

from .geometry import Pose9DoF
from .volume import VolumeMeta


def boxset_to_json(meta: VolumeMeta, boxes: Sequence[Pose9DoF], extra: Optional[dict] = None) -> dict:
    doc = {"image": meta.to_json(), "boxes": [b.to_json() for b in sorted(boxes, key=lambda b: b.label)]}
    if extra:
        doc.update(extra)
    return doc


def boxset_from_json(doc: dict) -> tuple[VolumeMeta, list[Pose9DoF]]:
    try:
        meta = VolumeMeta.from_json(doc["image"])
        boxes = [Pose9DoF.from_json(b) for b in doc["boxes"]]
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed box-set document: {exc}") from exc
    return meta, boxes


def save_boxset(path, meta: VolumeMeta, boxes: Sequence[Pose9DoF], extra: Optional[dict] = None) -> None:
    with open(path, "w") as fh:
        json.dump(boxset_to_json(meta, boxes, extra), fh, indent=1)
        fh.write("\n")


def load_boxset(path) -> tuple[VolumeMeta, list[Pose9DoF]]:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"malformed box-set document: {exc}") from exc
    return boxset_from_json(doc)
