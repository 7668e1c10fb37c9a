"""Panoptic quality metrics (PQ/SQ/RQ, mPQ, bPQ, masked variants) and
centroid-based detection scores.

Matching between ground-truth and predicted instance masks maximizes total
IoU via exact assignment; pairs above the 0.5 threshold are true positives.
The masked variants replace IoU with masked IoU, which ignores prediction
area falling on other annotated instances and is therefore fair to
predictions that model instance overlaps.
"""

from dataclasses import dataclass, field

import numpy as np

from .assignment import CostMatrix, solve
from .geometry import BinaryMask, centroid, iou, masked_iou

IOU_THRESHOLD = 0.5
DETECTION_RADIUS_UM = 3.0


@dataclass(frozen=True)
class MatchOutcome:
    """Result of matching one class on one image."""

    tp_pairs: tuple  # (gt index, pred index, score)
    fp: int
    fn: int

    @property
    def tp_scores(self) -> list:
        return [s for _, _, s in self.tp_pairs]


@dataclass(frozen=True)
class ClassPQ:
    sq: float
    rq: float
    pq: float
    tp: int
    fp: int
    fn: int
    defined: bool


@dataclass(frozen=True)
class PanopticReport:
    per_class: dict
    mpq: float
    bpq: float
    masked_per_class: dict = None
    masked_mpq: float = None
    masked_bpq: float = None
    mode: str = "macro"
    counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "mode": self.mode,
            "per_class": {
                str(c): {"sq": v.sq, "rq": v.rq, "pq": v.pq, "defined": v.defined}
                for c, v in self.per_class.items()
            },
            "mPQ": self.mpq,
            "bPQ": self.bpq,
            "counts": self.counts,
        }
        if self.masked_per_class is not None:
            out["masked_per_class"] = {
                str(c): {"sq": v.sq, "rq": v.rq, "pq": v.pq, "defined": v.defined}
                for c, v in self.masked_per_class.items()
            }
            out["mMPQ"] = self.masked_mpq
            out["bMPQ"] = self.masked_bpq
        return out


@dataclass(frozen=True)
class DetectionReport:
    precision: float
    recall: float
    f1: float
    matches: int
    threshold_um: float

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "matches": self.matches,
            "threshold_um": self.threshold_um,
        }


def match_by_iou(
    gt_masks,
    pred_masks,
    use_masked: bool = False,
    threshold: float = IOU_THRESHOLD,
    gt_union: BinaryMask = None,
) -> MatchOutcome:
    """Optimal bipartite matching maximizing total (masked) IoU.

    gt_union is the union of *all* ground-truth masks on the image and is
    required for masked scoring when gt_masks is a per-class subset; it
    defaults to the union of the masks given.
    """
    m, n = len(gt_masks), len(pred_masks)
    if m == 0 or n == 0:
        return MatchOutcome((), n, m)
    if use_masked and gt_union is None:
        pixels = np.zeros_like(gt_masks[0].pixels)
        for g in gt_masks:
            pixels |= g.pixels
        gt_union = BinaryMask(pixels)
    scores = np.zeros((m, n))
    for j, g in enumerate(gt_masks):
        for i, p in enumerate(pred_masks):
            scores[j, i] = masked_iou(g, p, gt_union) if use_masked else iou(g, p)
    if m <= n:
        result = solve(CostMatrix(-scores))
        pairs = result.pairs()
    else:
        result = solve(CostMatrix(-scores.T))
        pairs = [(j, i) for i, j in result.pairs()]
    tp = tuple(
        (j, i, float(scores[j, i])) for j, i in pairs if scores[j, i] > threshold
    )
    return MatchOutcome(tp, n - len(tp), m - len(tp))


def panoptic_quality(tp_scores, fp: int, fn: int) -> ClassPQ:
    """SQ = mean matched score, RQ = TP/(TP + FP/2 + FN/2), PQ = SQ * RQ.

    A class with no instances on either side is undefined and excluded from
    averages.
    """
    tp = len(tp_scores)
    if tp == 0 and fp == 0 and fn == 0:
        return ClassPQ(0.0, 0.0, 0.0, 0, 0, 0, defined=False)
    if tp == 0:
        return ClassPQ(0.0, 0.0, 0.0, 0, fp, fn, defined=True)
    sq = float(np.mean(tp_scores))
    rq = tp / (tp + 0.5 * fp + 0.5 * fn)
    return ClassPQ(sq, rq, sq * rq, tp, fp, fn, defined=True)


def _defined_mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def aggregate(per_image, classes, mode: str = "macro") -> dict:
    """Combine per-image MatchOutcome dicts into per-class PQ and mPQ.

    per_image: list of {class: MatchOutcome}. micro pools TP/FP/FN counts
    across images before computing PQ; macro computes the metric per image
    and averages defined values (so for multi-image macro pools, pq is a
    mean of per-image products and the per-unit PQ = SQ * RQ identity holds
    per image, not for the averages). Counts are pooled in both modes.
    """
    if mode not in ("micro", "macro"):
        raise ValueError(f"mode must be 'micro' or 'macro', got {mode!r}")
    per_class = {}
    for c in classes:
        outcomes = [img[c] for img in per_image if c in img]
        tp = sum(len(o.tp_pairs) for o in outcomes)
        fp = sum(o.fp for o in outcomes)
        fn = sum(o.fn for o in outcomes)
        if mode == "micro":
            scores = [s for o in outcomes for s in o.tp_scores]
            per_class[c] = panoptic_quality(scores, fp, fn)
        else:
            image_values = [
                panoptic_quality(o.tp_scores, o.fp, o.fn) for o in outcomes
            ]
            defined_values = [v for v in image_values if v.defined]
            if not defined_values:
                per_class[c] = ClassPQ(0.0, 0.0, 0.0, 0, fp, fn, defined=False)
            else:
                per_class[c] = ClassPQ(
                    _defined_mean([v.sq for v in defined_values]),
                    _defined_mean([v.rq for v in defined_values]),
                    _defined_mean([v.pq for v in defined_values]),
                    tp,
                    fp,
                    fn,
                    defined=True,
                )
    mean_pq = _defined_mean([v.pq for v in per_class.values() if v.defined])
    return {"per_class": per_class, "mean_pq": mean_pq}


def evaluate_panoptic(
    gt_masks,
    gt_classes,
    pred_masks,
    pred_classes,
    num_classes: int,
    mode: str = "macro",
    masked: bool = False,
) -> PanopticReport:
    """Single-image panoptic report: per-class PQ, mPQ, bPQ (+ masked twins)."""
    outcomes = _image_outcomes(gt_masks, gt_classes, pred_masks, pred_classes, num_classes)
    return build_report([outcomes], num_classes, mode=mode, masked=masked)


def _image_outcomes(gt_masks, gt_classes, pred_masks, pred_classes, num_classes):
    """Per-class, binary, and masked MatchOutcomes for one image."""
    gt_union = None
    if gt_masks:
        pixels = np.zeros_like(gt_masks[0].pixels)
        for g in gt_masks:
            pixels |= g.pixels
        gt_union = BinaryMask(pixels)
    out = {"plain": {}, "masked": {}}
    for c in range(num_classes):
        g = [m for m, gc in zip(gt_masks, gt_classes) if gc == c]
        p = [m for m, pc in zip(pred_masks, pred_classes) if pc == c]
        out["plain"][c] = match_by_iou(g, p, use_masked=False)
        out["masked"][c] = match_by_iou(g, p, use_masked=True, gt_union=gt_union)
    out["plain"]["binary"] = match_by_iou(list(gt_masks), list(pred_masks), use_masked=False)
    out["masked"]["binary"] = match_by_iou(
        list(gt_masks), list(pred_masks), use_masked=True, gt_union=gt_union
    )
    return out


def build_report(image_outcomes, num_classes, mode="macro", masked=False) -> PanopticReport:
    """Aggregate per-image outcomes (from _image_outcomes) into a report."""
    classes = list(range(num_classes))
    plain = aggregate([img["plain"] for img in image_outcomes], classes, mode)
    binary = aggregate([img["plain"] for img in image_outcomes], ["binary"], mode)
    counts = {
        str(c): {"tp": v.tp, "fp": v.fp, "fn": v.fn}
        for c, v in plain["per_class"].items()
    }
    bpq_class = binary["per_class"]["binary"]
    counts["binary"] = {"tp": bpq_class.tp, "fp": bpq_class.fp, "fn": bpq_class.fn}
    report = dict(
        per_class=plain["per_class"],
        mpq=plain["mean_pq"],
        bpq=bpq_class.pq if bpq_class.defined else None,
        mode=mode,
        counts=counts,
    )
    if masked:
        m_plain = aggregate([img["masked"] for img in image_outcomes], classes, mode)
        m_binary = aggregate([img["masked"] for img in image_outcomes], ["binary"], mode)
        m_bpq = m_binary["per_class"]["binary"]
        report.update(
            masked_per_class=m_plain["per_class"],
            masked_mpq=m_plain["mean_pq"],
            masked_bpq=m_bpq.pq if m_bpq.defined else None,
        )
    return PanopticReport(**report)


def detection_match(
    gt_centroids,
    pred_centroids,
    pred_scores,
    resolution: float,
    radius_um: float = DETECTION_RADIUS_UM,
) -> DetectionReport:
    """Greedy score-descending centroid matching within a physical radius.

    Each ground truth matches at most once; the distance threshold
    radius_um / resolution is inclusive. Ties in score break by input
    order, ties in distance by ground-truth index.
    """
    if resolution <= 0:
        raise ValueError(f"resolution must be positive, got {resolution}")
    gt = np.asarray(gt_centroids, dtype=np.float64).reshape(-1, 2)
    pr = np.asarray(pred_centroids, dtype=np.float64).reshape(-1, 2)
    scores = np.asarray(pred_scores, dtype=np.float64).reshape(-1)
    if pr.shape[0] != scores.shape[0]:
        raise ValueError("need one score per predicted centroid")
    limit = radius_um / resolution
    order = np.argsort(-scores, kind="stable")
    taken = np.zeros(gt.shape[0], dtype=bool)
    tp = 0
    for i in order:
        if not gt.shape[0]:
            break
        dist = np.hypot(gt[:, 0] - pr[i, 0], gt[:, 1] - pr[i, 1])
        dist[taken] = np.inf
        j = int(np.argmin(dist))
        if dist[j] <= limit:
            taken[j] = True
            tp += 1
    fp = pr.shape[0] - tp
    fn = gt.shape[0] - tp
    precision = tp / (tp + fp) if (tp + fp) else 0.0
    recall = tp / (tp + fn) if (tp + fn) else 0.0
    f1 = 2 * precision * recall / (precision + recall) if (precision + recall) else 0.0
    return DetectionReport(precision, recall, f1, tp, radius_um)


def mask_centroids(masks) -> np.ndarray:
    """Centroids of a list of masks, shape (len, 2)."""
    return np.array([centroid(m) for m in masks]).reshape(len(masks), 2)
