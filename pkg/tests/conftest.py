"""Shared scene builders for the test suite."""

import numpy as np
import pytest

from starpoly.assignment import solve
from starpoly.bounds import LabelRaster, build_tables, lookup_bounds
from starpoly.criterion import (
    GroundTruthSet,
    PredictionSet,
    matching_cost_matrix,
    total_loss,
)
from starpoly.geometry import RAY_COUNT, ShapeDescriptor
from starpoly.synthetic import random_label_raster


def block_labels(width, height, blocks, resolution=0.25, class_names=("nucleus",)):
    """Labels from (x0, x1, y0, y1, id) half-open blocks; later blocks win."""
    ids = np.zeros((height, width), dtype=np.int32)
    for x0, x1, y0, y1, inst in blocks:
        ids[y0:y1, x0:x1] = inst
    classes = {
        int(i): class_names[(int(i) - 1) % len(class_names)]
        for i in np.unique(ids)
        if i > 0
    }
    return LabelRaster(ids, classes, resolution)


def constant_tables(width, height, lo, hi):
    """Bound tables holding the same (lo, hi) row at every pixel."""
    from starpoly.bounds import BoundTables

    r_min = np.full((height, width, RAY_COUNT), float(lo))
    r_max = np.full((height, width, RAY_COUNT), float(hi))
    return BoundTables(r_min, r_max)


def predictions_from_arrays(positions, radii, logits, raster_size, grid_radius=0.1):
    descriptors = tuple(
        ShapeDescriptor(positions[i], radii[i], logits[i])
        for i in range(len(positions))
    )
    return PredictionSet(descriptors, raster_size, grid_radius)


def loss_at(gt, labels, tables, assignment, positions, radii, logits, alpha, gamma):
    """total_loss rebuilt from raw arrays; used by finite-difference probes."""
    pred = predictions_from_arrays(positions, radii, logits, (labels.width, labels.height))
    return total_loss(gt, pred, labels, tables, assignment, alpha, gamma).total


def sample_gradient_config(rng, margin=1e-3):
    """Random differentiable configuration: all kinks at least `margin` away.

    Returns (gt, pred, labels, tables, assignment) where matched predictions
    sit strictly inside foreground pixels, away from interpolation-cell
    lines, with radii pushed off their bounds and centroid offsets off zero.
    """
    names = ("alpha", "beta", "gamma")
    while True:
        labels = random_label_raster(
            20, 20, rng, max_instances=3, class_names=names, interior_only=True
        )
        if not labels.instance_ids:
            continue
        tables = build_tables(labels)
        gt = GroundTruthSet.from_labels(labels, names)
        m = gt.num_instances
        n = m + int(rng.integers(1, 3))

        fg = np.argwhere(labels.ids > 0)
        positions = []
        radii = []
        logits = rng.normal(size=(n, len(names) + 1)) * 2.0
        ok = True
        for i in range(n):
            if i < m:
                y, x = fg[rng.integers(len(fg))]
                p_px = np.array([x, y]) + rng.uniform(0.2, 0.3, size=2)
            else:
                p_px = rng.uniform(1.0, 19.0, size=2)
            frac = p_px - np.floor(p_px)
            # stay off pixel lines and interpolation-cell (half-integer) lines
            dist = np.minimum(np.abs(frac - 0.5), np.minimum(frac, 1.0 - frac))
            if np.any(dist < 10 * margin):
                ok = False
                break
            lo, hi = lookup_bounds(tables, p_px)
            r = np.empty(RAY_COUNT)
            for k in range(RAY_COUNT):
                branch = rng.integers(3)
                if branch == 0 and lo[k] > 0.3:  # below the lower bound
                    r[k] = lo[k] * rng.uniform(0.3, 0.9)
                elif branch == 1 and np.isfinite(hi[k]):  # above the upper bound
                    r[k] = hi[k] + rng.uniform(0.1, 2.0)
                else:  # inside the plausible range
                    if np.isfinite(hi[k]) and hi[k] - lo[k] > 4 * margin:
                        r[k] = rng.uniform(lo[k] + margin, hi[k] - margin)
                    else:
                        r[k] = lo[k] + rng.uniform(0.1, 2.0)
                if min(abs(r[k] - lo[k]), abs(r[k] - hi[k]) if np.isfinite(hi[k]) else 1.0) < margin:
                    r[k] = lo[k] + rng.uniform(0.1, 2.0) if not np.isfinite(hi[k]) else r[k]
            positions.append(p_px / 20.0)
            radii.append(np.maximum(r, margin))
        if not ok:
            continue

        pred = predictions_from_arrays(
            np.array(positions), np.array(radii), logits, (20, 20)
        )
        costs = matching_cost_matrix(gt, pred, labels, tables)
        assignment = solve(costs)

        # matched pairs must not sit exactly on a point-loss kink
        clean = True
        for j, i in assignment.pairs():
            p_px = np.array(positions[i]) * 20.0
            if np.any(np.abs(gt.centroids[j] - p_px) < 10 * margin):
                clean = False
                break
            lo, hi = lookup_bounds(tables, p_px)
            r = np.asarray(radii[i])
            gap_lo = np.abs(r - lo)
            gap_hi = np.where(np.isfinite(hi), np.abs(r - hi), 1.0)
            if min(gap_lo.min(), gap_hi.min()) < margin:
                clean = False
                break
        if clean:
            return gt, pred, labels, tables, assignment


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
