"""Command line entry point: ``boxmil <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from . import harness
from .bags import (AngleSet, NEGATIVE, baseline_negative_plan, baseline_positive_plan, outside_mask,
                   parallel_positive_plan, polar_membership, polar_positive_plan, select_polar_origin)
from .data import read_annotations, read_pgm, write_pgm, write_predictions
from .geometry import PolarGrid, box_mask, crop_with_margin, rotate_region
from .gradsuite import OPS, run_check
from .model import load_checkpoint, predict
from .validation import ContractError, FormatError


def _cmd_gen_data(args):
    ds = harness.generate_dataset_dir(args.spec, args.out)
    n_boxes = sum(len(a.boxes) for a in ds.annotations)
    print(f"wrote {len(ds)} images, {n_boxes} boxes to {args.out}")


def _cmd_train(args):
    config = harness.TrainConfig.read(args.config)
    result = harness.train(config, args.out, verbose=args.verbose)
    print(result.report.summary())


def _cmd_eval(args):
    from .data import load_dataset

    params = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    report = harness.evaluate(params, ds, args.group_by, args.threshold)
    for g, d in zip(report.groups, report.dice):
        print(f"{args.group_by} {g}: dice {d:.4f}")
    print(f"mean {report.mean:.4f} std {report.std:.4f}")
    if args.predictions:
        os.makedirs(args.predictions, exist_ok=True)
        for i, p in enumerate(predict(params, ds.images)):
            write_predictions(os.path.join(args.predictions, f"{i:05d}.bin"), p)


def _cmd_grid(args):
    base = harness.TrainConfig.read(args.config)
    grid = harness.parse_grid(harness.read_kv(args.grid), args.grid)
    ranked = harness.grid_search(base, grid, workers=args.workers)
    keys = list(grid)
    for rank, (cfg, report) in enumerate(ranked, start=1):
        point = " ".join(f"{k}={harness._fmt(getattr(cfg, k))}" for k in keys)
        print(f"{rank:3d}  {point}  {report.summary()}")


def _bag_rows(plan, start):
    return [(start + i, plan.polarity, int(n)) for i, n in enumerate(plan.lengths)]


def _cmd_bags_dump(args):
    image = read_pgm(args.image)
    dims = image.shape
    anns = read_annotations(args.boxes)
    if args.image_id >= len(anns):
        raise FormatError(f"{args.boxes}: no boxes for image {args.image_id}")
    boxes = anns[args.image_id].boxes
    os.makedirs(args.out, exist_ok=True)
    angles = AngleSet.parse(args.angles)
    grid = PolarGrid(args.n_r, args.n_theta)
    rows = []
    for k, box in enumerate(boxes):
        box.check_within(dims)
        region, _ = crop_with_margin(image, box, args.margin)
        mregion, _ = crop_with_margin(box_mask(box, dims), box, args.margin)
        stem = os.path.join(args.out, f"box{k}")
        if args.mode == "baseline":
            plan = baseline_positive_plan(box, dims)
            write_pgm(f"{stem}_image.pgm", region)
            write_pgm(f"{stem}_mask.pgm", mregion)
        elif args.mode == "parallel":
            plan = parallel_positive_plan(box, dims, angles, args.margin)
            for theta in angles.values():
                tag = f"{stem}_a{theta:+g}"
                write_pgm(f"{tag}_image.pgm", np.clip(rotate_region(region, theta), 0, 1))
                write_pgm(f"{tag}_mask.pgm", rotate_region(mregion, theta) >= 0.5)
        else:
            origin = select_polar_origin(image, box)
            plan = polar_positive_plan(box, origin, dims, grid, args.margin, args.w_min)
            idx, coef, inside = polar_membership(box, origin, dims, grid, args.margin)
            polar = (image.reshape(-1)[idx] * coef).sum(axis=-1)
            write_pgm(f"{stem}_polar_image.pgm", np.clip(polar, 0, 1))
            write_pgm(f"{stem}_polar_mask.pgm", np.cumprod(inside, axis=0).astype(bool))
        # bag index map on the input grid: pixel value = 1 + bag id of its first bag
        index_map = np.zeros(dims, dtype=np.float64)
        for b in range(len(plan)):
            hit = np.zeros(dims[0] * dims[1])
            np.add.at(hit, plan.index[b][plan.weights[b] > 0].ravel(),
                      plan.coef[b][plan.weights[b] > 0].ravel())
            hit = hit.reshape(dims) > 0
            index_map[hit & (index_map == 0)] = b + 1
        write_pgm(f"{stem}_index.pgm", (index_map % 255).astype(np.uint8))
        rows += _bag_rows(plan, len(rows))
    categories = sorted({b.category for b in boxes})
    for c in categories:
        if args.mode == "baseline":
            neg = baseline_negative_plan(boxes, c, dims)
            rows += _bag_rows(neg, len(rows))
        else:
            n_px = int(outside_mask(boxes, c, dims).sum())
            rows += [(len(rows) + i, NEGATIVE, 1) for i in range(n_px)]
    with open(os.path.join(args.out, "bags.csv"), "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["bag_id", "polarity", "length"])
        wr.writerows(rows)
    n_pos = sum(r[1] != NEGATIVE for r in rows)
    print(f"{len(boxes)} boxes: {n_pos} positive and {len(rows) - n_pos} negative bags -> {args.out}")


def _cmd_gradcheck(args):
    err = run_check(args.op, args.seed)
    print(f"{args.op} seed={args.seed} max_rel_err={err:.3e}")
    return 0 if err < args.tol else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="boxmil", description="Box-supervised MIL segmentation.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    s.add_argument("--spec", required=True, help="key = value synthetic spec file")
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_gen_data)

    s = sub.add_parser("train", help="train a model from a config file")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--verbose", action="store_true")
    s.set_defaults(func=_cmd_train)

    s = sub.add_parser("eval", help="grouped dice of a checkpoint on a dataset")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--group-by", choices=harness.GROUP_BY, default="volume")
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--predictions", help="directory for per-image prediction dumps")
    s.set_defaults(func=_cmd_eval)

    s = sub.add_parser("grid", help="grid search over config values")
    s.add_argument("--config", required=True)
    s.add_argument("--grid", required=True, help="key = v1 | v2 | ... file")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=_cmd_grid)

    s = sub.add_parser("bags-dump", help="write transformed regions and bag sizes")
    s.add_argument("--image", required=True, help="8-bit PGM")
    s.add_argument("--boxes", required=True, help="annotations CSV")
    s.add_argument("--mode", choices=("baseline", "parallel", "polar"), required=True)
    s.add_argument("--out", default="bags_dump")
    s.add_argument("--image-id", type=int, default=0)
    s.add_argument("--angles", default="-40,40,20")
    s.add_argument("--n-r", type=int, default=20)
    s.add_argument("--n-theta", type=int, default=60)
    s.add_argument("--w-min", type=float, default=0.5)
    s.add_argument("--margin", type=int, default=2)
    s.set_defaults(func=_cmd_bags_dump)

    s = sub.add_parser("gradcheck", help="finite-difference check of one op")
    s.add_argument("--op", required=True, choices=sorted(OPS))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(func=_cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "seed", 0) < 0:
        print("error: seed must be a non-negative integer", file=sys.stderr)
        return 2
    try:
        return args.func(args) or 0
    except (FormatError, ContractError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
