"""Set-prediction objective: matching costs, bounded radial loss, gradients.

Matching pairs each ground-truth nucleus with its best prediction by
minimizing a pairwise cost (class + point + radial + inner-mask terms); the
loss then combines focal classification over all predictions with point and
radial reconstruction terms over the matched pairs.

The radial term is the flexible-range loss: a predicted radius is free
anywhere inside [r_min, r_max] from the bound tables and pays the linear
violation outside, which is what lets predictions cover plausible instance
overlaps without penalty. All geometric terms are evaluated in pixels.
"""

from dataclasses import dataclass

import numpy as np

from .assignment import CostMatrix, MatchResult, solve
from .bounds import BoundTables, LabelRaster, is_foreground, lookup_bounds
from .bounds import fixed_boundary_mode  # noqa: F401  (part of this module's surface)
from .geometry import RAY_COUNT, BinaryMask, centroid, point_in_mask

DEFAULT_LAMBDA = 10.0
DEFAULT_ALPHA = 0.25
DEFAULT_GAMMA = 2.0


@dataclass(frozen=True)
class GroundTruthSet:
    """M annotated instances: masks, class indices, centroids, their union."""

    masks: tuple
    class_ids: np.ndarray
    centroids: np.ndarray
    union: BinaryMask
    resolution: float

    @property
    def num_instances(self) -> int:
        return len(self.masks)

    @classmethod
    def from_labels(cls, labels: LabelRaster, class_vocab) -> "GroundTruthSet":
        """Split a flat label raster into per-instance masks and centroids."""
        vocab_index = {name: k for k, name in enumerate(class_vocab)}
        masks = []
        class_ids = []
        cents = []
        for inst in labels.instance_ids:
            mask = BinaryMask(labels.ids == inst)
            name = labels.classes[inst]
            if name not in vocab_index:
                raise ValueError(f"class {name!r} not in vocabulary {list(class_vocab)}")
            masks.append(mask)
            class_ids.append(vocab_index[name])
            cents.append(centroid(mask))
        union = BinaryMask(labels.ids > 0)
        return cls(
            tuple(masks),
            np.asarray(class_ids, dtype=np.int64),
            np.asarray(cents, dtype=np.float64).reshape(len(masks), 2),
            union,
            labels.resolution,
        )


@dataclass(frozen=True)
class PredictionSet:
    """N shape descriptors plus the raster geometry they live on."""

    descriptors: tuple
    raster_size: tuple
    grid_radius: float

    @property
    def num_predictions(self) -> int:
        return len(self.descriptors)

    @property
    def positions(self) -> np.ndarray:
        return np.array([d.p for d in self.descriptors]).reshape(-1, 2)

    @property
    def radii(self) -> np.ndarray:
        return np.array([d.r for d in self.descriptors]).reshape(-1, RAY_COUNT)

    @property
    def logits(self) -> np.ndarray:
        return np.array([d.class_logits for d in self.descriptors])


@dataclass(frozen=True)
class LossBreakdown:
    classification: float
    point: float
    radial: float
    total: float
    per_layer: tuple = None

    def to_dict(self) -> dict:
        out = {
            "classification": self.classification,
            "point": self.point,
            "radial": self.radial,
            "total": self.total,
        }
        if self.per_layer is not None:
            out["per_layer"] = [layer.to_dict() for layer in self.per_layer]
        return out


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def _scale_to_px(p, width, height):
    return np.array([p[0] * width, p[1] * height])


def inner_mask_cost(gt_mask: BinaryMask, p, lam: float = DEFAULT_LAMBDA) -> float:
    """0 if the (normalized) point falls inside the mask, else lam."""
    if lam <= 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    p_px = _scale_to_px(p, gt_mask.width, gt_mask.height)
    return 0.0 if point_in_mask(gt_mask, p_px) else lam


def point_loss(gt_centroid, p, raster_size) -> float:
    """L1 distance in pixels between a centroid and a normalized point."""
    size = np.broadcast_to(np.asarray(raster_size, dtype=np.float64), (2,))
    p_px = np.asarray(p, dtype=np.float64) * size
    return float(np.abs(np.asarray(gt_centroid, dtype=np.float64) - p_px).sum())


def radial_loss(p, r, labels: LabelRaster, tables: BoundTables) -> float:
    """Mean per-ray violation of [r_min, r_max]; 0 at non-foreground points.

    Rays whose upper bound is +inf only constrain from below.
    """
    p_px = _scale_to_px(p, labels.width, labels.height)
    if not is_foreground(labels, p_px):
        return 0.0
    lo, hi = lookup_bounds(tables, p_px)
    r = np.asarray(r, dtype=np.float64)
    violation = np.maximum(np.maximum(lo - r, 0.0), r - hi)
    return float(violation.mean())


def focal_loss(
    logits,
    target_class: int,
    alpha: float = DEFAULT_ALPHA,
    gamma: float = DEFAULT_GAMMA,
) -> float:
    """Sigmoid focal loss summed over all class slots with a one-hot target."""
    x = np.asarray(logits, dtype=np.float64)
    if not 0 <= target_class < x.shape[0]:
        raise ValueError(f"target class {target_class} out of range for {x.shape[0]} slots")
    q = 1.0 / (1.0 + np.exp(-x))
    one_mq = 1.0 / (1.0 + np.exp(x))
    log_q = _log_sigmoid(x)
    log_1mq = _log_sigmoid(-x)
    pos = -alpha * one_mq**gamma * log_q
    neg = -(1.0 - alpha) * q**gamma * log_1mq
    terms = neg.copy()
    terms[target_class] = pos[target_class]
    return float(terms.sum())


def focal_loss_gradient(
    logits,
    target_class: int,
    alpha: float = DEFAULT_ALPHA,
    gamma: float = DEFAULT_GAMMA,
) -> np.ndarray:
    """d focal_loss / d logits, shape (K+1,)."""
    x = np.asarray(logits, dtype=np.float64)
    q = 1.0 / (1.0 + np.exp(-x))
    one_mq = 1.0 / (1.0 + np.exp(x))
    log_q = _log_sigmoid(x)
    log_1mq = _log_sigmoid(-x)
    grad_pos = -alpha * one_mq**gamma * (one_mq - gamma * q * log_q)
    grad_neg = (1.0 - alpha) * q**gamma * (q - gamma * one_mq * log_1mq)
    grad = grad_neg.copy()
    grad[target_class] = grad_pos[target_class]
    return grad


def matching_class_cost(
    logits,
    target_class: int,
    alpha: float = DEFAULT_ALPHA,
    gamma: float = DEFAULT_GAMMA,
) -> float:
    """Focal-style matching cost at the target slot's probability.

    cost(q) = alpha (1-q)^gamma (-log q) - (1-alpha) q^gamma (-log(1-q)),
    strictly decreasing in q, so confident correct predictions are cheaper
    to match.
    """
    x = float(np.asarray(logits, dtype=np.float64)[target_class])
    q = 1.0 / (1.0 + np.exp(-x))
    one_mq = 1.0 / (1.0 + np.exp(x))
    log_q = float(_log_sigmoid(np.array(x)))
    log_1mq = float(_log_sigmoid(np.array(-x)))
    return -alpha * one_mq**gamma * log_q + (1.0 - alpha) * q**gamma * log_1mq


def matching_cost_matrix(
    gt: GroundTruthSet,
    pred: PredictionSet,
    labels: LabelRaster,
    tables: BoundTables,
    lam: float = DEFAULT_LAMBDA,
    alpha: float = DEFAULT_ALPHA,
    gamma: float = DEFAULT_GAMMA,
) -> CostMatrix:
    """Pairwise matching costs, entry (j, i) = W_c + L_p + L_r + W_m.

    The radial term does not depend on the ground-truth row and is computed
    once per prediction. The same foreground gating as the loss applies.
    """
    m = gt.num_instances
    n = pred.num_predictions
    if n < m:
        raise ValueError(f"need at least as many predictions as instances ({n} < {m})")
    size = (labels.width, labels.height)
    radial = np.array(
        [radial_loss(d.p, d.r, labels, tables) for d in pred.descriptors]
    )
    costs = np.zeros((m, n))
    for j in range(m):
        mask = gt.masks[j]
        cj = int(gt.class_ids[j])
        cent = gt.centroids[j]
        for i, d in enumerate(pred.descriptors):
            costs[j, i] = (
                matching_class_cost(d.class_logits, cj, alpha, gamma)
                + point_loss(cent, d.p, size)
                + radial[i]
                + inner_mask_cost(mask, d.p, lam)
            )
    return CostMatrix(costs)


def total_loss(
    gt: GroundTruthSet,
    pred: PredictionSet,
    labels: LabelRaster,
    tables: BoundTables,
    assignment: MatchResult,
    alpha: float = DEFAULT_ALPHA,
    gamma: float = DEFAULT_GAMMA,
) -> LossBreakdown:
    """Focal classification over all N predictions plus matched shape terms.

    Matched predictions target their ground-truth class, the rest target the
    null class; point and radial terms average over the M matched pairs (and
    vanish when M = 0).
    """
    m = gt.num_instances
    n = pred.num_predictions
    null_class = pred.descriptors[0].num_classes if n else 0
    size = (labels.width, labels.height)

    matched_cols = set(int(c) for c in assignment.column_for_row)
    cls_sum = 0.0
    for j, i in assignment.pairs():
        cls_sum += focal_loss(
            pred.descriptors[i].class_logits, int(gt.class_ids[j]), alpha, gamma
        )
    for i in range(n):
        if i not in matched_cols:
            cls_sum += focal_loss(pred.descriptors[i].class_logits, null_class, alpha, gamma)
    classification = cls_sum / n if n else 0.0

    point = 0.0
    radial = 0.0
    if m:
        for j, i in assignment.pairs():
            d = pred.descriptors[i]
            point += point_loss(gt.centroids[j], d.p, size)
            radial += radial_loss(d.p, d.r, labels, tables)
        point /= m
        radial /= m

    return LossBreakdown(classification, point, radial, classification + point + radial)


def evaluate_layers(
    gt: GroundTruthSet,
    layer_predictions,
    labels: LabelRaster,
    tables: BoundTables,
    lam: float = DEFAULT_LAMBDA,
    alpha: float = DEFAULT_ALPHA,
    gamma: float = DEFAULT_GAMMA,
) -> LossBreakdown:
    """Match and evaluate every decoder layer; terms sum with equal weight."""
    per_layer = []
    for pred in layer_predictions:
        costs = matching_cost_matrix(gt, pred, labels, tables, lam, alpha, gamma)
        assignment = solve(costs)
        per_layer.append(total_loss(gt, pred, labels, tables, assignment, alpha, gamma))
    return LossBreakdown(
        sum(b.classification for b in per_layer),
        sum(b.point for b in per_layer),
        sum(b.radial for b in per_layer),
        sum(b.total for b in per_layer),
        per_layer=tuple(per_layer),
    )


@dataclass(frozen=True)
class LossGradients:
    """Analytic subgradients of total_loss at a fixed assignment."""

    d_logits: np.ndarray
    d_p: np.ndarray
    d_r: np.ndarray
    at_kink: np.ndarray


def _bilinear_bound_gradient(tables: BoundTables, p_px, active_lo, active_hi):
    """d(mean violation)/d p_px through the bilinear bound interpolation."""
    from .bounds import _bilinear_cell

    u = p_px[0] - 0.5
    v = p_px[1] - 0.5
    fx = u - np.floor(u)
    fy = v - np.floor(v)
    cells, _ = _bilinear_cell(tables.width, tables.height, p_px)
    (x00, y00), (x10, _), (x01, y01), (x11, _) = cells

    grad = np.zeros(2)
    for table, active, sign in ((tables.r_min, active_lo, 1.0), (tables.r_max, active_hi, -1.0)):
        if not active.any():
            continue
        v00 = table[y00, x00, active]
        v10 = table[y00, x10, active]
        v01 = table[y01, x01, active]
        v11 = table[y01, x11, active]
        d_fx = (1.0 - fy) * (v10 - v00) + fy * (v11 - v01)
        d_fy = (1.0 - fx) * (v01 - v00) + fx * (v11 - v10)
        grad[0] += sign * d_fx.sum()
        grad[1] += sign * d_fy.sum()
    return grad / RAY_COUNT


def loss_gradients(
    gt: GroundTruthSet,
    pred: PredictionSet,
    labels: LabelRaster,
    tables: BoundTables,
    assignment: MatchResult,
    alpha: float = DEFAULT_ALPHA,
    gamma: float = DEFAULT_GAMMA,
    kink_tol: float = 1e-9,
) -> LossGradients:
    """Gradients of total_loss w.r.t. each prediction's logits, p, and r.

    The assignment is treated as a constant. The radial and point terms are
    piecewise linear; at an exact kink (a radius sitting on its bound, a
    point-loss coordinate at zero, or p on an interpolation-cell line) the
    returned subgradient is flagged via at_kink.
    """
    m = gt.num_instances
    n = pred.num_predictions
    null_class = pred.descriptors[0].num_classes if n else 0
    width, height = labels.width, labels.height
    k_plus_1 = pred.logits.shape[1] if n else 0

    d_logits = np.zeros((n, k_plus_1))
    d_p = np.zeros((n, 2))
    d_r = np.zeros((n, RAY_COUNT))
    at_kink = np.zeros(n, dtype=bool)

    matched = {int(i): int(j) for j, i in assignment.pairs()}
    for i in range(n):
        d = pred.descriptors[i]
        target = int(gt.class_ids[matched[i]]) if i in matched else null_class
        d_logits[i] = focal_loss_gradient(d.class_logits, target, alpha, gamma) / n
        if i not in matched or m == 0:
            continue
        j = matched[i]

        p_px = _scale_to_px(d.p, width, height)
        diff = gt.centroids[j] - p_px
        if np.any(np.abs(diff) < kink_tol):
            at_kink[i] = True
        d_p[i] += -np.sign(diff) * np.array([width, height]) / m

        if not is_foreground(labels, p_px):
            continue
        lo, hi = lookup_bounds(tables, p_px)
        below = d.r < lo
        above = d.r > hi
        if np.any(np.abs(d.r - lo) < kink_tol) or np.any(
            np.isfinite(hi) & (np.abs(d.r - hi) < kink_tol)
        ):
            at_kink[i] = True
        frac = p_px - 0.5
        frac = frac - np.floor(frac)
        if np.any(np.minimum(frac, 1.0 - frac) < kink_tol):
            at_kink[i] = True
        d_r[i] = (above.astype(float) - below.astype(float)) / (RAY_COUNT * m)
        bound_grad = _bilinear_bound_gradient(tables, p_px, below, above)
        d_p[i] += bound_grad * np.array([width, height]) / m

    return LossGradients(d_logits, d_p, d_r, at_kink)
