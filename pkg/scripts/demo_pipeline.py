#!/usr/bin/env python3
"""End-to-end walkthrough on a synthetic scene.

Generates a random label raster, builds its bound tables, constructs
predictions from the ground truth (one slightly perturbed polygon per
instance), then runs matching, the loss, overlap resolution, and the
panoptic/detection metrics.
"""

import argparse

import numpy as np

from starpoly.assignment import solve
from starpoly.bounds import build_tables, lookup_bounds
from starpoly.criterion import (
    GroundTruthSet,
    PredictionSet,
    matching_cost_matrix,
    total_loss,
)
from starpoly.geometry import RAY_COUNT, BinaryMask, ShapeDescriptor, rasterize
from starpoly.metrics import detection_match, evaluate_panoptic, mask_centroids
from starpoly.postprocess import InstanceStack, resolve_overlaps
from starpoly.synthetic import random_label_raster


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--size", type=int, default=48)
    args = parser.parse_args()

    rng = np.random.default_rng(args.seed)
    labels = random_label_raster(args.size, args.size, args.seed, max_instances=6)
    tables = build_tables(labels)
    gt = GroundTruthSet.from_labels(labels, ("nucleus",))
    print(f"scene: {gt.num_instances} instances on {args.size}x{args.size}")

    descriptors = []
    for j in range(gt.num_instances):
        p_px = gt.centroids[j] + rng.uniform(-0.4, 0.4, size=2)
        lo, hi = lookup_bounds(tables, p_px)
        radii = np.maximum(np.where(np.isfinite(hi), (lo + hi) / 2, lo + 1.0), 0.5)
        logits = np.array([4.0, -4.0])
        descriptors.append(ShapeDescriptor(p_px / args.size, radii, logits))
    descriptors.append(  # one surplus query the matcher should leave out
        ShapeDescriptor(np.array([0.5, 0.5]), np.full(RAY_COUNT, 1.0), np.array([-4.0, 4.0]))
    )
    pred = PredictionSet(tuple(descriptors), (args.size, args.size), 0.1)

    costs = matching_cost_matrix(gt, pred, labels, tables)
    assignment = solve(costs)
    breakdown = total_loss(gt, pred, labels, tables, assignment)
    print(f"matching cost: {assignment.total_cost:.4f}")
    print(
        "loss: classification={0.classification:.5f} point={0.point:.4f} "
        "radial={0.radial:.4f} total={0.total:.4f}".format(breakdown)
    )

    masks = [rasterize(d, args.size, args.size) for d in descriptors[:-1]]
    stack = InstanceStack(
        tuple(masks),
        tuple(range(1, len(masks) + 1)),
        tuple("nucleus" for _ in masks),
        tuple(d.score for d in descriptors[:-1]),
    )
    resolved = resolve_overlaps(stack, resolution=labels.resolution)
    print(f"resolved instances: {len(resolved.instance_ids)}")

    gt_masks = [BinaryMask(labels.ids == i) for i in labels.instance_ids]
    pred_masks = [BinaryMask(resolved.ids == i) for i in resolved.instance_ids]
    report = evaluate_panoptic(
        gt_masks, [0] * len(gt_masks), pred_masks, [0] * len(pred_masks), 1, masked=True
    )
    print(f"bPQ={report.bpq:.3f} bMPQ={report.masked_bpq:.3f}")

    det = detection_match(
        mask_centroids(gt_masks),
        mask_centroids(pred_masks),
        [1.0] * len(pred_masks),
        labels.resolution,
    )
    print(f"detection: P={det.precision:.3f} R={det.recall:.3f} F1={det.f1:.3f}")


if __name__ == "__main__":
    main()
