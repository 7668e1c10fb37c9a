import numpy as np
import pytest

from starpoly.assignment import solve
from starpoly.bounds import build_tables, lookup_bounds
from starpoly.criterion import (
    GroundTruthSet,
    evaluate_layers,
    fixed_boundary_mode,
    focal_loss,
    focal_loss_gradient,
    inner_mask_cost,
    loss_gradients,
    matching_class_cost,
    matching_cost_matrix,
    point_loss,
    radial_loss,
    total_loss,
)
from starpoly.geometry import RAY_COUNT, BinaryMask

from conftest import (
    block_labels,
    constant_tables,
    loss_at,
    predictions_from_arrays,
    sample_gradient_config,
)
from oracles import brute_force_assignment


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def focal_reference(logits, target, alpha, gamma):
    """Direct-formula focal loss, written independently of the library's."""
    q = sigmoid(logits)
    total = 0.0
    for i, qi in enumerate(q):
        if i == target:
            total += -alpha * (1 - qi) ** gamma * np.log(qi)
        else:
            total += -(1 - alpha) * qi**gamma * np.log(1 - qi)
    return total


class TestFocalLoss:
    def test_perfect_prediction_limit(self):
        logits = np.array([40.0, -40.0, -40.0])
        assert focal_loss(logits, 0) < 1e-12

    def test_closed_form_weighted_ce(self):
        # gamma=0, target probability 1/2, all other slots at probability ~0
        logits = np.array([0.0, -50.0, -50.0])
        assert focal_loss(logits, 0, alpha=0.25, gamma=0.0) == pytest.approx(
            0.25 * np.log(2), rel=1e-12
        )

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            logits = rng.normal(size=6) * 3
            target = int(rng.integers(6))
            alpha = rng.uniform(0.1, 0.9)
            gamma = rng.uniform(0.0, 4.0)
            assert focal_loss(logits, target, alpha, gamma) == pytest.approx(
                focal_reference(logits, target, alpha, gamma), rel=1e-12, abs=1e-300
            )

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            logits = rng.normal(size=4) * 2
            target = int(rng.integers(4))
            grad = focal_loss_gradient(logits, target)
            for i in range(4):
                h = np.zeros(4)
                h[i] = 1e-5
                fd = (focal_loss(logits + h, target) - focal_loss(logits - h, target)) / 2e-5
                # abs guard covers finite-difference cancellation noise
                assert grad[i] == pytest.approx(fd, rel=1e-4, abs=1e-9)


class TestMatchingClassCost:
    def test_half_probability_value(self):
        assert matching_class_cost(np.array([0.0, -3.0]), 0, 0.25, 2.0) == pytest.approx(
            0.25 * 0.25 * np.log(2) - 0.75 * 0.25 * np.log(2)
        )

    def test_monotone_decreasing_in_confidence(self):
        grid = np.linspace(-6, 6, 25)
        costs = [matching_class_cost(np.array([x, 0.0]), 0) for x in grid]
        assert all(b < a for a, b in zip(costs, costs[1:]))


class TestInnerMaskCost:
    def test_inside_outside(self):
        mask = BinaryMask(np.zeros((10, 10), dtype=bool))
        mask.pixels[4, 4] = True
        assert inner_mask_cost(mask, (0.45, 0.45), 10.0) == 0.0
        assert inner_mask_cost(mask, (0.05, 0.05), 10.0) == 10.0

    def test_edge_of_covered_pixel(self):
        mask = BinaryMask(np.zeros((10, 10), dtype=bool))
        mask.pixels[4, 4] = True
        assert inner_mask_cost(mask, (0.4, 0.4), 10.0) == 0.0  # (4.0, 4.0) is in pixel (4,4)

    def test_lambda_positive_required(self):
        mask = BinaryMask(np.zeros((4, 4), dtype=bool))
        with pytest.raises(ValueError):
            inner_mask_cost(mask, (0.5, 0.5), 0.0)


class TestPointLoss:
    def test_values(self):
        assert point_loss((128.0, 128.0), (0.5, 0.5), 256) == 0.0
        assert point_loss((131.0, 132.0), (0.5, 0.5), 256) == pytest.approx(7.0)
        assert point_loss((130.0, 130.0), (0.5, 0.5), 256) == pytest.approx(4.0)


class TestRadialLoss:
    def test_inside_range_is_free(self):
        labels = block_labels(16, 16, [(0, 16, 0, 16, 1)])
        tables = constant_tables(16, 16, 2.0, 5.0)
        assert radial_loss((0.5, 0.5), np.full(RAY_COUNT, 3.0), labels, tables) == 0.0

    def test_uniform_violation(self):
        labels = block_labels(16, 16, [(0, 16, 0, 16, 1)])
        tables = constant_tables(16, 16, 2.0, 5.0)
        assert radial_loss((0.5, 0.5), np.full(RAY_COUNT, 1.0), labels, tables) == pytest.approx(1.0)

    def test_infinite_upper_bound_only_constrains_below(self):
        labels = block_labels(16, 16, [(0, 16, 0, 16, 1)])
        tables = constant_tables(16, 16, 2.0, np.inf)
        assert radial_loss((0.5, 0.5), np.full(RAY_COUNT, 1e6), labels, tables) == 0.0

    def test_background_point_ignored(self):
        labels = block_labels(16, 16, [(4, 8, 4, 8, 1)])
        tables = constant_tables(16, 16, 2.0, 5.0)
        assert radial_loss((0.05, 0.05), np.full(RAY_COUNT, 100.0), labels, tables) == 0.0

    def test_out_of_frame_point_is_zero(self):
        labels = block_labels(16, 16, [(4, 8, 4, 8, 1)])
        tables = constant_tables(16, 16, 2.0, 5.0)
        assert radial_loss((0.999999, 1.0), np.full(RAY_COUNT, 100.0), labels, tables) == 0.0


def simple_scene():
    """One 5x5 instance plus one 3x3 instance in a 20x20 raster."""
    labels = block_labels(
        20, 20, [(3, 8, 3, 8, 1), (12, 15, 12, 15, 2)], class_names=("a", "b")
    )
    tables = build_tables(labels)
    gt = GroundTruthSet.from_labels(labels, ("a", "b"))
    return labels, tables, gt


class TestMatchingCostMatrix:
    def test_perfect_prediction_leaves_only_class_cost(self):
        labels, tables, gt = simple_scene()
        lo, hi = lookup_bounds(tables, gt.centroids[0])
        r = np.where(np.isfinite(hi), (lo + hi) / 2, lo + 1.0)
        logits = np.array([6.0, -6.0, -6.0])
        pred = predictions_from_arrays(
            [gt.centroids[0] / 20.0, np.array([0.95, 0.95])],
            [r, np.full(RAY_COUNT, 1.0)],
            [logits, np.array([-6.0, -6.0, 6.0])],
            (20, 20),
        )
        costs = matching_cost_matrix(gt, pred, labels, tables)
        assert costs.costs[0, 0] == pytest.approx(matching_class_cost(logits, 0))

    def test_outside_mask_pays_lambda(self):
        labels, tables, gt = simple_scene()
        pred = predictions_from_arrays(
            [np.array([0.95, 0.05]), np.array([0.05, 0.95])],
            [np.full(RAY_COUNT, 1.0)] * 2,
            [np.zeros(3)] * 2,
            (20, 20),
        )
        lam = 10.0
        costs = matching_cost_matrix(gt, pred, labels, tables, lam=lam)
        base = matching_class_cost(np.zeros(3), 0)
        lp = point_loss(gt.centroids[0], (0.95, 0.05), (20, 20))
        assert costs.costs[0, 0] == pytest.approx(base + lp + lam)

    def test_term_wise_recomputation(self):
        labels, tables, gt = simple_scene()
        rng = np.random.default_rng(9)
        positions = rng.uniform(0.1, 0.9, size=(4, 2))
        radii = rng.uniform(0.5, 6.0, size=(4, RAY_COUNT))
        logits = rng.normal(size=(4, 3))
        pred = predictions_from_arrays(positions, radii, logits, (20, 20))
        costs = matching_cost_matrix(gt, pred, labels, tables, lam=7.0)
        for j in range(gt.num_instances):
            for i in range(4):
                expected = (
                    matching_class_cost(logits[i], int(gt.class_ids[j]))
                    + point_loss(gt.centroids[j], positions[i], (20, 20))
                    + radial_loss(positions[i], radii[i], labels, tables)
                    + inner_mask_cost(gt.masks[j], positions[i], 7.0)
                )
                assert costs.costs[j, i] == pytest.approx(expected, rel=1e-12)

    def test_too_few_predictions_rejected(self):
        labels, tables, gt = simple_scene()
        pred = predictions_from_arrays(
            [np.array([0.5, 0.5])], [np.full(RAY_COUNT, 1.0)], [np.zeros(3)], (20, 20)
        )
        with pytest.raises(ValueError):
            matching_cost_matrix(gt, pred, labels, tables)


class TestTotalLoss:
    def test_empty_image_confident_null(self):
        labels = block_labels(16, 16, [])
        tables = build_tables(labels)
        gt = GroundTruthSet.from_labels(labels, ("a",))
        pred = predictions_from_arrays(
            [np.array([0.5, 0.5])] * 3,
            [np.full(RAY_COUNT, 1.0)] * 3,
            [np.array([-40.0, 40.0])] * 3,
            (16, 16),
        )
        costs = matching_cost_matrix(gt, pred, labels, tables)
        breakdown = total_loss(gt, pred, labels, tables, solve(costs))
        assert breakdown.point == 0.0 and breakdown.radial == 0.0
        assert breakdown.total < 1e-12

    def test_perfect_matches_zero_geometry_terms(self):
        labels, tables, gt = simple_scene()
        descriptors = []
        for j in range(2):
            lo, hi = lookup_bounds(tables, gt.centroids[j])
            r = np.where(np.isfinite(hi), (lo + hi) / 2, lo + 1.0)
            logits = np.full(3, -8.0)
            logits[gt.class_ids[j]] = 8.0
            descriptors.append((gt.centroids[j] / 20.0, np.maximum(r, 0.5), logits))
        extra = (np.array([0.6, 0.6]), np.full(RAY_COUNT, 1.0), np.array([-8.0, -8.0, 8.0]))
        descriptors.append(extra)
        pred = predictions_from_arrays(
            [d[0] for d in descriptors],
            [d[1] for d in descriptors],
            [d[2] for d in descriptors],
            (20, 20),
        )
        costs = matching_cost_matrix(gt, pred, labels, tables)
        breakdown = total_loss(gt, pred, labels, tables, solve(costs))
        assert breakdown.point == pytest.approx(0.0, abs=1e-12)
        assert breakdown.radial == pytest.approx(0.0, abs=1e-12)
        assert breakdown.total == pytest.approx(breakdown.classification)

    def test_compositional_oracle(self):
        labels, tables, gt = simple_scene()
        rng = np.random.default_rng(21)
        n = 5
        positions = rng.uniform(0.1, 0.9, size=(n, 2))
        radii = rng.uniform(0.5, 6.0, size=(n, RAY_COUNT))
        logits = rng.normal(size=(n, 3))
        pred = predictions_from_arrays(positions, radii, logits, (20, 20))
        assignment = solve(matching_cost_matrix(gt, pred, labels, tables))
        breakdown = total_loss(gt, pred, labels, tables, assignment)

        matched = dict(assignment.pairs())
        cls = 0.0
        for j, i in matched.items():
            cls += focal_loss(logits[i], int(gt.class_ids[j]))
        for i in range(n):
            if i not in matched.values():
                cls += focal_loss(logits[i], 2)
        cls /= n
        point = np.mean(
            [point_loss(gt.centroids[j], positions[i], (20, 20)) for j, i in matched.items()]
        )
        radial = np.mean(
            [radial_loss(positions[i], radii[i], labels, tables) for j, i in matched.items()]
        )
        assert breakdown.classification == pytest.approx(cls, rel=1e-12)
        assert breakdown.point == pytest.approx(point, rel=1e-12)
        assert breakdown.radial == pytest.approx(radial, rel=1e-12)
        assert breakdown.total == pytest.approx(cls + point + radial, rel=1e-12)

    def test_matching_is_optimal_under_matching_objective(self):
        rng = np.random.default_rng(31)
        for _ in range(10):
            labels, tables, gt = simple_scene()
            n = 5
            positions = rng.uniform(0.1, 0.9, size=(n, 2))
            radii = rng.uniform(0.5, 6.0, size=(n, RAY_COUNT))
            logits = rng.normal(size=(n, 3))
            pred = predictions_from_arrays(positions, radii, logits, (20, 20))
            costs = matching_cost_matrix(gt, pred, labels, tables)
            result = solve(costs)
            _, best = brute_force_assignment(costs.costs)
            assert result.total_cost == pytest.approx(best, abs=1e-9)


class TestEvaluateLayers:
    def test_terms_sum_with_equal_weight(self):
        labels, tables, gt = simple_scene()
        rng = np.random.default_rng(4)
        layers = []
        for _ in range(3):
            positions = rng.uniform(0.1, 0.9, size=(3, 2))
            radii = rng.uniform(0.5, 6.0, size=(3, RAY_COUNT))
            logits = rng.normal(size=(3, 3))
            layers.append(predictions_from_arrays(positions, radii, logits, (20, 20)))
        combined = evaluate_layers(gt, layers, labels, tables)
        assert len(combined.per_layer) == 3
        assert combined.total == pytest.approx(sum(b.total for b in combined.per_layer))
        assert combined.radial == pytest.approx(sum(b.radial for b in combined.per_layer))


class TestOverlapTolerance:
    def overlap_scene(self):
        """Two partially overlapping rectangles painted into one flat raster."""
        labels = block_labels(
            24, 24, [(3, 13, 8, 16, 1), (10, 20, 8, 16, 2)], class_names=("a",)
        )
        return labels, build_tables(labels)

    def test_flexible_range_admits_overlap_fixed_does_not(self):
        labels, tables = self.overlap_scene()
        # prediction centered inside instance 1 extending over instance 2's
        # extent: plausible if instance 2 occludes instance 1
        center_px = np.array([11.3, 12.3])  # inside the painted-over strip (id 2)
        lo, hi = lookup_bounds(tables, center_px)
        r = np.where(np.isfinite(hi), hi - 0.25, lo + 3.0)
        r = np.maximum(r, lo)  # stay plausible on every ray
        flexible = radial_loss(center_px / 24.0, r, labels, tables)
        assert flexible == 0.0
        fixed = radial_loss(center_px / 24.0, r, labels, fixed_boundary_mode(tables))
        assert fixed > 0.1

    def test_full_loss_comparison(self):
        labels, tables = self.overlap_scene()
        gt = GroundTruthSet.from_labels(labels, ("a",))
        descriptors = []
        for j in range(gt.num_instances):
            p_px = gt.centroids[j]
            lo, hi = lookup_bounds(tables, p_px)
            r = np.where(np.isfinite(hi), hi - 0.25, lo + 2.0)
            r = np.maximum(np.maximum(r, lo), 0.5)
            logits = np.array([8.0, -8.0])
            descriptors.append((p_px / 24.0, r, logits))
        pred = predictions_from_arrays(
            [d[0] for d in descriptors],
            [d[1] for d in descriptors],
            [d[2] for d in descriptors],
            (24, 24),
        )
        assignment = solve(matching_cost_matrix(gt, pred, labels, tables))
        flexible = total_loss(gt, pred, labels, tables, assignment)
        fixed_tables = fixed_boundary_mode(tables)
        fixed = total_loss(gt, pred, labels, fixed_tables, assignment)
        assert flexible.radial == pytest.approx(0.0, abs=1e-12)
        assert fixed.radial > 0.01


class TestLossGradients:
    def test_zero_radial_gradient_inside_bounds(self):
        labels = block_labels(20, 20, [(2, 18, 2, 18, 1)])
        tables = constant_tables(20, 20, 2.0, 5.0)
        gt = GroundTruthSet.from_labels(labels, ("nucleus",))
        pred = predictions_from_arrays(
            [np.array([0.43, 0.52]), np.array([0.27, 0.31])],
            [np.full(RAY_COUNT, 3.5), np.full(RAY_COUNT, 4.0)],
            [np.zeros(2), np.zeros(2)],
            (20, 20),
        )
        assignment = solve(matching_cost_matrix(gt, pred, labels, tables))
        grads = loss_gradients(gt, pred, labels, tables, assignment)
        matched_pred = dict(assignment.pairs())[0]
        assert np.all(grads.d_r[matched_pred] == 0.0)

    def test_below_lower_bound_slope(self):
        labels = block_labels(20, 20, [(2, 18, 2, 18, 1)])
        tables = constant_tables(20, 20, 4.0, 8.0)
        gt = GroundTruthSet.from_labels(labels, ("nucleus",))
        r = np.full(RAY_COUNT, 2.0)  # below the lower bound on every ray
        pred = predictions_from_arrays(
            [np.array([0.43, 0.52]), np.array([0.27, 0.31])],
            [r, np.full(RAY_COUNT, 6.0)],
            [np.zeros(2), np.zeros(2)],
            (20, 20),
        )
        assignment = solve(matching_cost_matrix(gt, pred, labels, tables))
        grads = loss_gradients(gt, pred, labels, tables, assignment)
        i = dict(assignment.pairs())[0]
        m = gt.num_instances
        assert np.allclose(grads.d_r[i], -1.0 / (RAY_COUNT * m))

    def test_matches_finite_differences(self, rng):
        failures = []
        for _ in range(25):
            gt, pred, labels, tables, assignment = sample_gradient_config(rng)
            check_gradients(gt, pred, labels, tables, assignment, failures)
        assert not failures, failures[:5]


def check_gradients(gt, pred, labels, tables, assignment, failures, tol=1e-4):
    """Central finite differences at 1e-4 px steps vs analytic gradients."""
    alpha, gamma = 0.25, 2.0
    grads = loss_gradients(gt, pred, labels, tables, assignment, alpha, gamma)
    if grads.at_kink.any():
        return
    positions = pred.positions
    radii = pred.radii
    logits = pred.logits
    n = pred.num_predictions
    width = labels.width

    def loss_with(pos, rad, lg):
        return loss_at(gt, labels, tables, assignment, pos, rad, lg, alpha, gamma)

    rng_local = np.random.default_rng(0)
    for i in range(n):
        for axis in range(2):
            h = 1e-4 / width  # 1e-4 px expressed in normalized coordinates
            pos_hi = positions.copy()
            pos_lo = positions.copy()
            pos_hi[i, axis] += h
            pos_lo[i, axis] -= h
            fd = (loss_with(pos_hi, radii, logits) - loss_with(pos_lo, radii, logits)) / (2 * h)
            compare(grads.d_p[i, axis], fd, f"p[{i},{axis}]", failures, tol)
        for k in rng_local.choice(RAY_COUNT, size=6, replace=False):
            h = 1e-4
            rad_hi = radii.copy()
            rad_lo = radii.copy()
            rad_hi[i, k] += h
            rad_lo[i, k] -= h
            fd = (loss_with(positions, rad_hi, logits) - loss_with(positions, rad_lo, logits)) / (2 * h)
            compare(grads.d_r[i, k], fd, f"r[{i},{k}]", failures, tol)
        for c in range(logits.shape[1]):
            h = 1e-4
            lg_hi = logits.copy()
            lg_lo = logits.copy()
            lg_hi[i, c] += h
            lg_lo[i, c] -= h
            fd = (loss_with(positions, radii, lg_hi) - loss_with(positions, radii, lg_lo)) / (2 * h)
            compare(grads.d_logits[i, c], fd, f"logits[{i},{c}]", failures, tol)


def compare(analytic, fd, label, failures, tol):
    # the 1e-6 floor absorbs finite-difference cancellation noise (~1e-11
    # at step 1e-4) on gradients that are essentially zero, e.g. saturated
    # focal slots; every coordinate above it is held to the relative tol
    denom = max(abs(analytic), abs(fd), 1e-6)
    if abs(analytic - fd) / denom > tol:
        failures.append((label, float(analytic), float(fd)))


class TestScaleHomogeneity:
    def test_doubling_scene_doubles_pixel_losses(self):
        labels = block_labels(20, 20, [(4, 15, 6, 14, 1)])
        tables = build_tables(labels)
        gt = GroundTruthSet.from_labels(labels, ("nucleus",))
        big_ids = np.kron(labels.ids, np.ones((2, 2), dtype=np.int32))
        from starpoly.bounds import LabelRaster

        big_labels = LabelRaster(big_ids, labels.classes, labels.resolution)
        big_tables = build_tables(big_labels)
        big_gt = GroundTruthSet.from_labels(big_labels, ("nucleus",))

        p = np.array([0.47, 0.52])
        lo, _ = lookup_bounds(tables, p * 20)
        r = np.maximum(lo * 0.5, 0.1)  # below the lower bound on every ray

        small_point = point_loss(gt.centroids[0], p, (20, 20))
        big_point = point_loss(big_gt.centroids[0], p, (40, 40))
        assert big_point == pytest.approx(2 * small_point, rel=1e-12)

        small_radial = radial_loss(p, r, labels, tables)
        big_radial = radial_loss(p, 2 * r, big_labels, big_tables)
        assert small_radial > 0
        assert big_radial == pytest.approx(2 * small_radial, rel=2e-2)


class TestRadialZeroPositiveDichotomy:
    def test_inside_is_free_outside_is_charged(self):
        rng = np.random.default_rng(41)
        for seed in range(10):
            from starpoly.synthetic import random_label_raster

            labels = random_label_raster(20, 20, seed, max_instances=4)
            if not labels.instance_ids:
                continue
            tables = build_tables(labels)
            fg = np.argwhere(labels.ids > 0)
            y, x = fg[rng.integers(len(fg))]
            p_px = np.array([x + 0.5, y + 0.5])
            lo, hi = lookup_bounds(tables, p_px)
            inside = np.where(np.isfinite(hi), (lo + hi) / 2, lo + 1.0)
            inside = np.maximum(inside, 1e-6)
            p = p_px / 20.0
            assert radial_loss(p, inside, labels, tables) == 0.0
            pushed = inside.copy()
            k = int(rng.integers(64))
            pushed[k] = hi[k] + 0.5 if np.isfinite(hi[k]) else max(lo[k] - 0.5, lo[k] * 0.5)
            if pushed[k] <= 0 or pushed[k] == inside[k]:
                continue
            assert radial_loss(p, pushed, labels, tables) > 0.0
