"""Command-line surface tying the library together.

Every command emits a JSON report on stdout carrying the tool version, the
sha256 digest of each input file, and the seed (null when a command takes
none), so any output can be reproduced exactly. Failures print a
machine-readable error object on stderr and exit nonzero.
"""

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .assignment import solve
from .bounds import build_tables, fixed_boundary_mode, write_tables
from .criterion import (
    DEFAULT_ALPHA,
    DEFAULT_GAMMA,
    DEFAULT_LAMBDA,
    GroundTruthSet,
    PredictionSet,
    matching_cost_matrix,
    total_loss,
)
from .decoder import DecoderConfig, ModelParams, bench_scaling, forward
from .geometry import BinaryMask, rasterize
from .io import (
    PgmFormatError,
    descriptor_to_record,
    normalize_image,
    read_label_raster,
    read_polygons,
    record_to_descriptor,
    write_label_raster,
    write_polygons,
)
from .metrics import (
    DETECTION_RADIUS_UM,
    build_report,
    detection_match,
    mask_centroids,
    _image_outcomes,
)
from .postprocess import InstanceStack, resolve_overlaps
from .synthetic import synthetic_image

DEFAULT_CLASS_NAMES = ("neoplastic", "inflammatory", "dead", "epithelial", "connective")


def _digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _report(command, inputs, seed=None, **payload) -> dict:
    return {
        "tool": {"name": "starpoly", "version": __version__},
        "command": command,
        "seed": seed,
        "inputs": {name: {"path": str(p), "sha256": _digest(p)} for name, p in inputs.items()},
        **payload,
    }


def _parse_size(text) -> tuple:
    try:
        h, w = (int(x) for x in text.lower().split("x"))
    except ValueError as exc:
        raise ValueError(f"--size must be HxW, got {text!r}") from exc
    if h < 1 or w < 1:
        raise ValueError(f"--size must be positive, got {text!r}")
    return h, w


def _records_to_stack(records, width, height) -> InstanceStack:
    """Rasterize polygon records; records covering no pixel are dropped."""
    masks, ids, classes, scores = [], [], [], []
    for rec in records:
        mask = rasterize(
            record_to_descriptor_for_shape(rec), width, height
        )
        if mask.is_empty():
            continue
        masks.append(mask)
        ids.append(rec.id)
        classes.append(rec.class_name)
        scores.append(rec.score)
    return InstanceStack(tuple(masks), tuple(ids), tuple(classes), tuple(scores))


def record_to_descriptor_for_shape(rec):
    """Geometry-only descriptor (single dummy class slot)."""
    from .geometry import ShapeDescriptor

    return ShapeDescriptor(np.array(rec.p), np.array(rec.r), np.array([0.0, 0.0]))


def _labels_to_stack(labels) -> InstanceStack:
    masks, ids, classes = [], [], []
    for inst in labels.instance_ids:
        masks.append(BinaryMask(labels.ids == inst))
        ids.append(inst)
        classes.append(labels.classes[inst])
    return InstanceStack(tuple(masks), tuple(ids), tuple(classes), tuple([1.0] * len(ids)))


def _load_scene(labels_path, polygons_path, lam, alpha, gamma, fixed_boundary):
    labels = read_label_raster(labels_path)
    records = read_polygons(polygons_path)
    vocab = sorted(
        set(labels.classes.values()) | {rec.class_name for rec in records}
    )
    gt = GroundTruthSet.from_labels(labels, vocab)
    descriptors = tuple(record_to_descriptor(rec, vocab) for rec in records)
    pred = PredictionSet(descriptors, (labels.width, labels.height), 0.0)
    tables = build_tables(labels)
    if fixed_boundary:
        tables = fixed_boundary_mode(tables)
    costs = matching_cost_matrix(gt, pred, labels, tables, lam, alpha, gamma)
    return labels, gt, pred, tables, costs, vocab


def cmd_bounds(args) -> dict:
    labels = read_label_raster(args.labels)
    tables = build_tables(labels)
    write_tables(tables, args.output)
    finite = np.isfinite(tables.r_max[labels.ids > 0])
    return _report(
        "bounds",
        {"labels": args.labels},
        output=str(args.output),
        width=labels.width,
        height=labels.height,
        foreground_pixels=int((labels.ids > 0).sum()),
        infinite_upper_fraction=float(1.0 - finite.mean()) if finite.size else 0.0,
    )


def cmd_rasterize(args) -> dict:
    records = read_polygons(args.polygons)
    height, width = _parse_size(args.size)
    stack = _records_to_stack(records, width, height)
    if args.resolve:
        labels = resolve_overlaps(stack, resolution=args.resolution)
    else:
        # paint in record order; later records overwrite shared pixels
        ids = np.zeros((height, width), dtype=np.int32)
        for mask, inst in zip(stack.masks, stack.ids):
            ids[mask.pixels] = inst
        surviving = set(np.unique(ids).tolist()) - {0}
        classes = {
            int(i): c for i, c in zip(stack.ids, stack.classes) if i in surviving
        }
        from .bounds import LabelRaster

        labels = LabelRaster(ids, classes, args.resolution)
    write_label_raster(labels, args.output)
    return _report(
        "rasterize",
        {"polygons": args.polygons},
        output=str(args.output),
        instances=len(labels.instance_ids),
        resolved=bool(args.resolve),
    )


def cmd_resolve(args) -> dict:
    records = read_polygons(args.polygons)
    height, width = _parse_size(args.size)
    stack = _records_to_stack(records, width, height)
    labels = resolve_overlaps(stack, resolution=args.resolution)
    write_label_raster(labels, args.output)
    return _report(
        "resolve",
        {"polygons": args.polygons},
        output=str(args.output),
        instances=len(labels.instance_ids),
    )


def cmd_match(args) -> dict:
    labels, gt, pred, tables, costs, vocab = _load_scene(
        args.labels, args.polygons, args.lam, args.alpha, args.gamma, False
    )
    result = solve(costs)
    pairs = [
        {"gt": j, "pred": i, "cost": float(costs.costs[j, i])}
        for j, i in result.pairs()
    ]
    return _report(
        "match",
        {"labels": args.labels, "polygons": args.polygons},
        classes=vocab,
        num_ground_truth=gt.num_instances,
        num_predictions=pred.num_predictions,
        total_cost=result.total_cost,
        pairs=pairs,
        unmatched_predictions=[int(i) for i in result.unmatched_columns],
        cost_range=[float(costs.costs.min()), float(costs.costs.max())]
        if costs.costs.size
        else None,
    )


def cmd_loss(args) -> dict:
    labels, gt, pred, tables, costs, vocab = _load_scene(
        args.labels, args.polygons, args.lam, args.alpha, args.gamma, args.fixed_boundary
    )
    result = solve(costs)
    breakdown = total_loss(gt, pred, labels, tables, result, args.alpha, args.gamma)
    return _report(
        "loss",
        {"labels": args.labels, "polygons": args.polygons},
        classes=vocab,
        fixed_boundary=bool(args.fixed_boundary),
        params={"lambda": args.lam, "alpha": args.alpha, "gamma": args.gamma},
        matching_total_cost=result.total_cost,
        loss=breakdown.to_dict(),
    )


def _load_predictions_for_eval(pred_path, gt_labels):
    path = Path(pred_path)
    if path.suffix == ".jsonl":
        records = read_polygons(path)
        stack = _records_to_stack(records, gt_labels.width, gt_labels.height)
    else:
        labels = read_label_raster(path)
        if (labels.width, labels.height) != (gt_labels.width, gt_labels.height):
            raise ValueError(
                f"prediction raster {labels.width}x{labels.height} does not match "
                f"ground truth {gt_labels.width}x{gt_labels.height}"
            )
        stack = _labels_to_stack(labels)
    return stack


def cmd_eval(args) -> dict:
    gt_labels = read_label_raster(args.gt)
    gt_stack = _labels_to_stack(gt_labels)
    pred_stack = _load_predictions_for_eval(args.pred, gt_labels)
    vocab = sorted(set(gt_stack.classes) | set(pred_stack.classes))
    gt_classes = [vocab.index(c) for c in gt_stack.classes]
    pred_classes = [vocab.index(c) for c in pred_stack.classes]
    outcomes = _image_outcomes(
        list(gt_stack.masks), gt_classes, list(pred_stack.masks), pred_classes, len(vocab)
    )
    report = build_report([outcomes], len(vocab), mode=args.mode, masked=args.masked)
    payload = report.to_dict()
    payload["class_names"] = vocab
    return _report("eval", {"gt": args.gt, "pred": args.pred}, **payload)


def cmd_detect_eval(args) -> dict:
    gt_labels = read_label_raster(args.gt)
    gt_stack = _labels_to_stack(gt_labels)
    records = read_polygons(args.pred)
    pred_stack = _records_to_stack(records, gt_labels.width, gt_labels.height)
    gt_centroids = mask_centroids(list(gt_stack.masks))
    pred_centroids = mask_centroids(list(pred_stack.masks))
    report = detection_match(
        gt_centroids,
        pred_centroids,
        list(pred_stack.scores),
        gt_labels.resolution,
        radius_um=args.radius_um,
    )
    return _report(
        "detect-eval",
        {"gt": args.gt, "pred": args.pred},
        num_ground_truth=len(gt_stack.masks),
        num_predictions=len(pred_stack.masks),
        **report.to_dict(),
    )


def _load_image_pgm(path) -> np.ndarray:
    """16-bit grayscale PGM as a replicated-channel RGB image in [0, 1]."""
    data = Path(path).read_bytes()
    tokens, offset = _parse_header_for_image(data, path)
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval < 256:
        raise PgmFormatError(f"{path}: need a 16-bit PGM (maxval >= 256), found {maxval}")
    body = data[offset:]
    if len(body) != 2 * width * height:
        raise PgmFormatError(f"{path}: truncated image body")
    gray = (
        np.frombuffer(body, dtype=">u2").reshape(height, width).astype(np.float64)
        / maxval
    )
    return np.repeat(gray[:, :, None], 3, axis=2)


def _parse_header_for_image(data, path):
    from .io import _parse_pgm_header

    tokens, offset = _parse_pgm_header(data, path)
    if tokens[0] != b"P5":
        raise PgmFormatError(f"{path}: expected P5 image, found {tokens[0]!r}")
    return tokens, offset


def cmd_forward(args) -> dict:
    if (args.image is None) == (args.synthetic is None):
        raise ValueError("provide exactly one of <image.pgm> or --synthetic SIZE")
    inputs = {}
    if args.synthetic is not None:
        image = synthetic_image(args.synthetic, args.seed)
    else:
        image = _load_image_pgm(args.image)
        inputs["image"] = args.image
    config = DecoderConfig(tau=args.tau)
    params = ModelParams.generate(config, args.seed)
    result = forward(
        image=normalize_image(image),
        params=params,
        config=config,
        resolution=args.resolution,
    )
    records = [
        descriptor_to_record(d, i + 1, DEFAULT_CLASS_NAMES)
        for i, d in enumerate(result.detections)
    ]
    write_polygons(records, args.output)
    return _report(
        "forward",
        inputs,
        seed=args.seed,
        output=str(args.output),
        resolution=args.resolution,
        tau=args.tau,
        grid={"s": result.grid.s, "n": result.grid.n, "queries": result.grid.num_queries},
        token_counts=result.token_counts,
        detections=len(records),
    )


def cmd_bench(args) -> dict:
    sides = [int(x) for x in args.sides.split(",") if x]
    report = bench_scaling(sides, seed=args.seed, resolution=args.resolution)
    return _report(
        "bench",
        {},
        seed=args.seed,
        resolution=args.resolution,
        **report,
    )


class _JsonArgumentParser(argparse.ArgumentParser):
    """Usage errors also go to stderr as machine-readable JSON."""

    def error(self, message):
        print(
            json.dumps({"error": {"type": "UsageError", "message": message}}),
            file=sys.stderr,
        )
        raise SystemExit(2)


def build_parser() -> argparse.ArgumentParser:
    parser = _JsonArgumentParser(
        prog="starpoly",
        description="Star-convex polygon set prediction toolkit",
    )
    parser.add_argument("--version", action="version", version=f"starpoly {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bounds", help="build radial bound tables from a label raster")
    p.add_argument("labels")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("rasterize", help="rasterize polygons to a label raster")
    p.add_argument("polygons")
    p.add_argument("--size", required=True, help="raster size as HxW")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--resolve", action="store_true", help="watershed overlap resolution")
    p.add_argument("--resolution", type=float, default=0.25, help="um/px for the sidecar")
    p.set_defaults(func=cmd_rasterize)

    p = sub.add_parser("resolve", help="watershed overlap resolution to a label raster")
    p.add_argument("polygons")
    p.add_argument("--size", required=True, help="raster size as HxW")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--resolution", type=float, default=0.25, help="um/px for the sidecar")
    p.set_defaults(func=cmd_resolve)

    p = sub.add_parser("match", help="matching cost matrix summary and assignment")
    p.add_argument("labels")
    p.add_argument("polygons")
    p.add_argument("--lambda", dest="lam", type=float, default=DEFAULT_LAMBDA)
    p.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)
    p.add_argument("--gamma", type=float, default=DEFAULT_GAMMA)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("loss", help="set-prediction loss breakdown")
    p.add_argument("labels")
    p.add_argument("polygons")
    p.add_argument("--fixed-boundary", action="store_true")
    p.add_argument("--lambda", dest="lam", type=float, default=DEFAULT_LAMBDA)
    p.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)
    p.add_argument("--gamma", type=float, default=DEFAULT_GAMMA)
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("eval", help="panoptic quality report")
    p.add_argument("gt")
    p.add_argument("pred", help="label raster (.pgm) or polygons (.jsonl)")
    p.add_argument("--masked", action="store_true", help="also compute masked variants")
    p.add_argument("--mode", choices=("micro", "macro"), default="macro")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("detect-eval", help="centroid detection report")
    p.add_argument("gt")
    p.add_argument("pred", help="polygons (.jsonl)")
    p.add_argument("--radius-um", type=float, default=DETECTION_RADIUS_UM)
    p.set_defaults(func=cmd_detect_eval)

    p = sub.add_parser("forward", help="run the stub-backbone decoder")
    p.add_argument("image", nargs="?", default=None, help="16-bit grayscale PGM")
    p.add_argument("--synthetic", type=int, default=None, metavar="SIZE")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--resolution", type=float, default=0.25)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("bench", help="forward-pass scaling benchmark")
    p.add_argument("--sides", default="256,512,1024")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument(
        "--resolution",
        type=float,
        default=0.24609375,
        help="um/px; the default makes the query grid scale exactly with area",
    )
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        report = args.func(args)
    except Exception as exc:  # noqa: BLE001 - single reporting funnel
        print(
            json.dumps({"error": {"type": type(exc).__name__, "message": str(exc)}}),
            file=sys.stderr,
        )
        return 1
    print(json.dumps(report, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
