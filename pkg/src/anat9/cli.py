"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 data error.  All randomness comes
from ``--seed``; reports embed the resolved configuration.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import augment as aug
from .boxset import load_boxset, save_boxset
from .geometry import GeometryError, crop_resample, grid_crop_box, merge_back, normalize_target, pca_parameterize
from .matching import (
    CostCoeffs,
    GroundTruth,
    MatchingError,
    Prediction,
    build_index_cost,
    decode_predictions,
    match,
)
from .metrics import IdThresholds, evaluate_segmentation, identify, report_rows, write_rows_csv
from .synth import SceneConfig, SynthError, gen_scene
from .toydetect import (
    NotSteerable,
    QueryBank,
    TrainConfig,
    TrainingDiverged,
    binding_permutation,
    displacement,
    is_identity,
    steerable_infer,
    train_toy,
    write_history_csv,
)
from .volume import LabelVolume, VolumeError, VolumeMeta, load_volume, save_volume

log = logging.getLogger("anat9")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# configuration

_BLOCKS = {
    "coeffs": CostCoeffs,
    "thresholds": IdThresholds,
    "augment": aug.AugmentConfig,
    "scene": SceneConfig,
}
_TRAIN_KEYS = {"epochs", "lr", "init_scale", "background_weight", "scenes", "seeds", "lambdas"}
_TOP_KEYS = set(_BLOCKS) | {"train", "seed"}
_TRAIN_DEFAULTS = {"epochs": 2000, "lr": 0.05, "init_scale": 0.003, "background_weight": 1.0, "scenes": 1,
                   "seeds": 10, "lambdas": [0, 1, 2, 4, 8]}


def _tupled(v):
    return tuple(v) if isinstance(v, list) else v


def load_config(path: Optional[str]) -> dict:
    """Read and validate a config file; unknown keys are rejected."""
    raw = {}
    if path:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path}: {exc}") from exc
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise UsageError(f"unknown config key(s): {sorted(unknown)}")
    for name, cls in _BLOCKS.items():
        allowed = {f.name for f in fields(cls)}
        extra = set(raw.get(name, {})) - allowed
        if extra:
            raise UsageError(f"unknown key(s) in '{name}': {sorted(extra)}")
    extra = set(raw.get("train", {})) - _TRAIN_KEYS
    if extra:
        raise UsageError(f"unknown key(s) in 'train': {sorted(extra)}")
    return raw


class Resolved:
    """Config blocks merged with defaults, CLI overrides and the global seed."""

    def __init__(self, raw: dict, seed: int):
        self.seed = seed
        try:
            self.coeffs = CostCoeffs(**raw.get("coeffs", {}))
            self.thresholds = IdThresholds(**raw.get("thresholds", {}))
            block = {k: _tupled(v) for k, v in raw.get("augment", {}).items()}
            block["seed"] = seed
            self.augment = aug.AugmentConfig(**block)
            block = {k: _tupled(v) for k, v in raw.get("scene", {}).items()}
            block["seed"] = seed
            self.scene = SceneConfig(**block)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad config value: {exc}") from exc
        self.train = dict(_TRAIN_DEFAULTS) | raw.get("train", {})

    def echo(self) -> dict:
        return {
            "seed": self.seed,
            "coeffs": asdict(self.coeffs),
            "thresholds": asdict(self.thresholds),
            "augment": asdict(self.augment),
            "scene": asdict(self.scene),
            "train": self.train,
        }


def _dump(obj, path: Optional[Path]) -> None:
    text = json.dumps(obj, indent=1, sort_keys=True, default=_json_default) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        path.write_text(text)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(type(o).__name__)


def _out_dir(args) -> Optional[Path]:
    if args.out is None:
        return None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _labels_arg(text: str) -> list[int]:
    try:
        return [int(t) for t in text.replace(" ", "").split(",") if t]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _floats_arg(text: str) -> list[float]:
    try:
        return [float(t) for t in text.replace(" ", "").split(",") if t]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _meta_from(path: str) -> VolumeMeta:
    """Image metadata from a box-set JSON, a volume header or a NIfTI file."""
    p = Path(path)
    if p.suffix == ".json":
        doc = json.loads(p.read_text())
        if "image" in doc:
            return VolumeMeta.from_json(doc["image"])
        return VolumeMeta.from_json(doc)
    return load_volume(p, "scalar").meta


# --------------------------------------------------------------------------
# commands


def cmd_synth(args, cfg: Resolved) -> int:
    out = _out_dir(args) or Path(".")
    scene = gen_scene(cfg.scene)
    save_volume(scene.labels, out / "labels.json")
    save_boxset(out / "boxes.json", scene.meta, scene.gt_poses, {"config": cfg.echo()})
    log.info("wrote %d instances to %s", len(scene.gt_poses), out)
    return EXIT_OK


def cmd_parameterize(args, cfg: Resolved) -> int:
    vol = load_volume(args.volume, "label")
    boxes = [pca_parameterize(vol, lab) for lab in vol.labels()]
    out = _out_dir(args)
    if args.output:
        save_boxset(args.output, vol.meta, boxes)
    elif out:
        save_boxset(out / "boxes.json", vol.meta, boxes)
    else:
        _dump({"image": vol.meta.to_json(), "boxes": [b.to_json() for b in boxes]}, None)
    return EXIT_OK


def cmd_augment(args, cfg: Resolved) -> int:
    vol = load_volume(args.volume, "label")
    meta, poses = load_boxset(args.boxes)
    if args.op == "rigid":
        draw = aug.draw_rigid(cfg.augment)
        vol, poses = aug.rigid_augment(vol, poses, draw)
        info = {"translation": draw.translation, "scale": draw.scale, "angles": draw.angles}
    elif args.op == "crop":
        interval = tuple(args.interval) if args.interval else None
        vol, poses = aug.random_crop_z(vol, poses, interval, seed=cfg.seed)
        info = {}
    else:
        p = cfg.augment.erase_probability if args.probability is None else args.probability
        vol, poses = aug.random_erase_bottom_pair(vol, poses, p, seed=cfg.seed)
        info = {"probability": p}
    out = _out_dir(args) or Path(".")
    save_volume(vol, out / "labels.json")
    save_boxset(out / "boxes.json", vol.meta, poses, {"op": args.op, "draw": json.loads(json.dumps(info, default=_json_default)),
                                                       "config": cfg.echo()})
    return EXIT_OK


def _predictions_from_boxes(boxes, meta: VolumeMeta, num_classes: int) -> list[Prediction]:
    preds = []
    for b in boxes:
        probs = np.zeros(num_classes + 1)
        probs[b.label] = 1.0
        preds.append(Prediction(b.label, probs, normalize_target(b, meta, clip=True)))
    return preds


def cmd_match(args, cfg: Resolved) -> int:
    meta, gts = load_boxset(args.gt)
    _, pboxes = load_boxset(args.pred)
    coeffs = cfg.coeffs if args.lambda_m is None else cfg.coeffs.with_index(args.lambda_m)
    num_classes = max([b.label for b in gts] + [b.label for b in pboxes])
    preds = _predictions_from_boxes(pboxes, meta, num_classes)
    targets = [GroundTruth(g.label, normalize_target(g, meta, clip=True)) for g in gts]
    asg = match(preds, targets, coeffs, build_index_cost(num_classes))
    doc = {
        "assignment": [{"gt_label": g.label, "query": q} for g, q in zip(targets, asg.queries)],
        "total_cost": asg.total_cost,
        "identity": all(g.label == q for g, q in zip(targets, asg.queries)),
        "config": cfg.echo(),
    }
    out = _out_dir(args)
    _dump(doc, out / "match.json" if out else None)
    return EXIT_OK


def cmd_evaluate_det(args, cfg: Resolved) -> int:
    if len(args.gt) != len(args.pred):
        raise UsageError("--gt and --pred need the same number of files")

    def one(pair):
        g, p = pair
        _, gts = load_boxset(g)
        _, preds = load_boxset(p)
        return g, identify(preds, gts, cfg.thresholds)

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as ex:
        results = list(ex.map(one, zip(args.gt, args.pred)))
    cases = [{"case": Path(g).stem, "report": r.to_json()} for g, r in results]
    doc = {"cases": cases, "config": cfg.echo()}
    if len(cases) == 1:
        doc.update(cases[0]["report"])
    out = _out_dir(args)
    _dump(doc, out / "detection.json" if out else None)
    if out:
        rows = [row for g, r in results for row in report_rows(Path(g).stem, det=r)]
        write_rows_csv(rows, out / "detection.csv")
    return EXIT_OK


def cmd_evaluate_seg(args, cfg: Resolved) -> int:
    if len(args.gt) != len(args.pred):
        raise UsageError("--gt and --pred need the same number of files")

    def one(pair):
        g, p = pair
        return g, evaluate_segmentation(load_volume(g, "label"), load_volume(p, "label"),
                                        percentile=args.hd_percentile)

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as ex:
        results = list(ex.map(one, zip(args.gt, args.pred)))
    cases = [{"case": Path(g).stem, "report": r.to_json()} for g, r in results]
    doc = {"cases": cases, "config": cfg.echo()}
    if len(cases) == 1:
        doc.update(cases[0]["report"])
    out = _out_dir(args)
    _dump(doc, out / "segmentation.json" if out else None)
    if out:
        rows = [row for g, r in results for row in report_rows(Path(g).stem, seg=r)]
        write_rows_csv(rows, out / "segmentation.csv")
    return EXIT_OK


def cmd_crop(args, cfg: Resolved) -> int:
    kind = "scalar" if args.mode == "trilinear" else args.kind
    vol = load_volume(args.volume, kind)
    _, boxes = load_boxset(args.boxes)
    chosen = [b for b in boxes if b.label == args.label]
    if not chosen:
        raise ValueError(f"no box with label {args.label} in {args.boxes}")
    if args.grid_aligned:
        box, dims = grid_crop_box(chosen[0], vol.meta, args.expansion)
        sub = crop_resample(vol, box, 0.0, dims, args.mode)
    elif args.out_dims is None:
        raise UsageError("--out-dims is required unless --grid-aligned is given")
    else:
        sub = crop_resample(vol, chosen[0], args.expansion, args.out_dims, args.mode)
    if args.binary and isinstance(sub, LabelVolume):
        sub = LabelVolume(sub.meta, (sub.voxels == args.label).astype(np.uint16))
    save_volume(sub, args.output)
    return EXIT_OK


def cmd_merge(args, cfg: Resolved) -> int:
    target = _meta_from(args.target)
    items = []
    for spec in args.submask:
        path, _, label = spec.rpartition(":")
        if not path:
            raise UsageError(f"--submask expects PATH:LABEL, got {spec!r}")
        items.append((load_volume(path, "label"), int(label)))
    save_volume(merge_back(items, target), args.output)
    return EXIT_OK


def _scenes(cfg: Resolved, count: int) -> list:
    base = asdict(cfg.scene)
    return [gen_scene(SceneConfig(**(base | {"seed": cfg.seed + i}))) for i in range(count)]


def cmd_train_toy(args, cfg: Resolved) -> int:
    coeffs = cfg.coeffs if args.lambda_m is None else cfg.coeffs.with_index(args.lambda_m)
    t = cfg.train
    epochs = args.epochs or t["epochs"]
    scenes = _scenes(cfg, int(t["scenes"]))
    config = TrainConfig(scenes, epochs, float(t["lr"]), coeffs, cfg.seed, float(t["init_scale"]),
                         float(t["background_weight"]))
    try:
        bank, history = train_toy(config)
    except TrainingDiverged as exc:
        out = _out_dir(args)
        if out:
            write_history_csv(exc.history, out / "history.csv")
        raise
    out = _out_dir(args) or Path(".")
    doc = bank.to_json() | {"image": scenes[0].meta.to_json(), "config": cfg.echo() | {"coeffs": asdict(coeffs)}}
    _dump(doc, out / "bank.json")
    write_history_csv(history, out / "history.csv")
    log.info("binding identity: %s", is_identity(bank.binding))
    return EXIT_OK


def cmd_infer_toy(args, cfg: Resolved) -> int:
    doc = json.loads(Path(args.bank).read_text())
    bank = QueryBank.from_json(doc)
    if args.image:
        meta = _meta_from(args.image)
    elif "image" in doc:
        meta = VolumeMeta.from_json(doc["image"])
    else:
        raise UsageError("bank file has no image metadata; pass --image")
    labels = args.labels if args.labels else list(range(1, bank.num_classes + 1))
    boxes = steerable_infer(bank, labels, meta)
    out = _out_dir(args)
    if out:
        save_boxset(out / "boxes.json", meta, boxes, {"requested": labels})
    else:
        _dump({"image": meta.to_json(), "boxes": [b.to_json() for b in boxes], "requested": labels}, None)
    return EXIT_OK


def _ablate_one(job):
    scenes, config, thresholds = job
    bank, _ = train_toy(config)
    # what the queries learned, judged without the index cost
    learned = binding_permutation(bank, scenes[0], config.coeffs.with_index(0.0))
    boxes = decode_predictions(bank.predictions(), scenes[0].meta)
    return displacement(learned), is_identity(learned), identify(boxes, scenes[0].gt_poses, thresholds).id_rate


def ablate_lambda_m(cfg: Resolved, lambdas: Sequence[float], seeds: int, epochs: int, jobs: int = 1) -> list[dict]:
    """Train one bank per (lambda_m, seed) and summarize the learned bindings."""
    t = cfg.train
    scenes = _scenes(cfg, int(t["scenes"]))
    work = []
    for lm in lambdas:
        coeffs = cfg.coeffs.with_index(lm)
        for s in range(seeds):
            config = TrainConfig(scenes, epochs, float(t["lr"]), coeffs, cfg.seed + s, float(t["init_scale"]),
                                 float(t["background_weight"]))
            work.append((scenes, config, cfg.thresholds))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_ablate_one, work))
    else:
        results = [_ablate_one(w) for w in work]
    rows = []
    for k, lm in enumerate(lambdas):
        disp, ident, rates = zip(*results[k * seeds:(k + 1) * seeds])
        rows.append({
            "lambda_m": lm,
            "mean_displacement": float(np.mean(disp)),
            "identity_fraction": float(np.mean(ident)),
            "mean_id_rate": float(np.mean(rates)),
            "seeds": seeds,
        })
    return rows


def cmd_ablate(args, cfg: Resolved) -> int:
    t = cfg.train
    lambdas = args.lambda_m_values or t["lambdas"]
    rows = ablate_lambda_m(cfg, lambdas, args.seeds or int(t["seeds"]), args.epochs or int(t["epochs"]), args.jobs)
    out = _out_dir(args) or Path(".")
    with open(out / "ablate_lambda_m.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    _dump({"rows": rows, "config": cfg.echo()}, out / "ablate_lambda_m.json")
    return EXIT_OK


# --------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config with coeffs/thresholds/augment/scene/train blocks")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--jobs", type=int, default=1)
    common.add_argument("--out", help="output directory")

    p = _Parser(prog="anat9", description="9-DoF anatomy box toolkit")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic scene")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("parameterize", parents=[common], help="fit 9-DoF boxes to every label")
    s.add_argument("--volume", required=True)
    s.add_argument("--output", help="box-set JSON path (default: stdout or <out>/boxes.json)")
    s.set_defaults(func=cmd_parameterize)

    s = sub.add_parser("augment", parents=[common], help="augment a label volume and its boxes")
    s.add_argument("--volume", required=True)
    s.add_argument("--boxes", required=True)
    s.add_argument("--op", choices=["rigid", "crop", "erase"], required=True)
    s.add_argument("--interval", type=int, nargs=2, metavar=("Z0", "Z1"))
    s.add_argument("--probability", type=float)
    s.set_defaults(func=cmd_augment)

    s = sub.add_parser("match", parents=[common], help="match predicted to ground-truth boxes")
    s.add_argument("--gt", required=True)
    s.add_argument("--pred", required=True)
    s.add_argument("--lambda-m", type=float)
    s.set_defaults(func=cmd_match)

    s = sub.add_parser("evaluate-det", parents=[common], help="identification rate and deviations")
    s.add_argument("--gt", nargs="+", required=True)
    s.add_argument("--pred", nargs="+", required=True)
    s.set_defaults(func=cmd_evaluate_det)

    s = sub.add_parser("evaluate-seg", parents=[common], help="DSC / HD95 / ASSD per instance")
    s.add_argument("--gt", nargs="+", required=True)
    s.add_argument("--pred", nargs="+", required=True)
    s.add_argument("--hd-percentile", type=float, default=95.0, help="100 for plain Hausdorff")
    s.set_defaults(func=cmd_evaluate_seg)

    s = sub.add_parser("crop", parents=[common], help="crop an oriented box out of a volume")
    s.add_argument("--volume", required=True)
    s.add_argument("--boxes", required=True)
    s.add_argument("--label", type=int, required=True)
    s.add_argument("--expansion", type=float, default=0.0)
    s.add_argument("--out-dims", type=int, nargs=3)
    s.add_argument("--grid-aligned", action="store_true", help="crop on the input grid so merge is lossless")
    s.add_argument("--mode", choices=["nearest", "trilinear"], default="nearest")
    s.add_argument("--kind", choices=["label", "scalar"], default="label")
    s.add_argument("--binary", action="store_true", help="keep only the box's own label as 1")
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_crop)

    s = sub.add_parser("merge", parents=[common], help="merge binary submasks into an instance volume")
    s.add_argument("--target", required=True, help="volume or box-set file giving the target grid")
    s.add_argument("--submask", nargs="+", required=True, metavar="PATH:LABEL")
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_merge)

    s = sub.add_parser("train-toy", parents=[common], help="train the query-only toy detector")
    s.add_argument("--lambda-m", type=float)
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_train_toy)

    s = sub.add_parser("infer-toy", parents=[common], help="steerable inference from a trained bank")
    s.add_argument("--bank", required=True)
    s.add_argument("--labels", type=_labels_arg)
    s.add_argument("--image", help="metadata source if the bank file lacks one")
    s.set_defaults(func=cmd_infer_toy)

    s = sub.add_parser("ablate-lambda-m", parents=[common], help="binding displacement versus index-cost weight")
    s.add_argument("--lambda-m-values", type=_floats_arg)
    s.add_argument("--seeds", type=int)
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_ablate)
    return p


def _setup_logging() -> None:
    level = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("ANAT9_LOG", "quiet").lower(), logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("missing subcommand")
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        cfg = Resolved(load_config(args.config), args.seed)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"anat9: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (VolumeError, GeometryError, MatchingError, SynthError, NotSteerable, TrainingDiverged,
            ValueError, KeyError, OSError) as exc:
        print(f"anat9: error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
