"""Star-convex polygon geometry: rasterization, containment, IoU, centroids.

Conventions used throughout the package:

* image coordinates are x rightward, y downward;
* ray 0 points along +x and ray indices advance clockwise on screen
  (mathematically counter-clockwise in the y-down frame);
* pixel (x, y) is the unit square [x, x+1) x [y, y+1) with center
  (x + 0.5, y + 0.5);
* normalized positions live in [0, 1]^2 and scale per axis by the raster
  width/height; radial distances are in pixels.
"""

from dataclasses import dataclass, field

import numpy as np

RAY_COUNT = 64


class EmptyMaskError(ValueError):
    """Raised when an operation needs at least one covered pixel."""


def ray_directions(count: int = RAY_COUNT) -> np.ndarray:
    """Equiangular unit direction vectors, shape (count, 2).

    Direction k is (cos(2*pi*k/count), sin(2*pi*k/count)) in the y-down
    image frame.
    """
    if count < 3:
        raise ValueError(f"need at least 3 rays, got {count}")
    angles = 2.0 * np.pi * np.arange(count) / count
    return np.stack([np.cos(angles), np.sin(angles)], axis=1)


@dataclass(frozen=True)
class ShapeDescriptor:
    """One nucleus hypothesis: center p, 64 radii, class logits.

    p is normalized to [0,1]^2, radii are strictly positive pixels, and
    class_logits has K+1 slots where the last one is the "no nucleus"
    category. Scores come from per-slot sigmoids (multi-label convention).
    """

    p: np.ndarray
    r: np.ndarray
    class_logits: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0]))

    def __post_init__(self):
        object.__setattr__(self, "p", np.asarray(self.p, dtype=np.float64))
        object.__setattr__(self, "r", np.asarray(self.r, dtype=np.float64))
        object.__setattr__(
            self, "class_logits", np.asarray(self.class_logits, dtype=np.float64)
        )
        if self.p.shape != (2,):
            raise ValueError(f"p must have shape (2,), got {self.p.shape}")
        if self.r.shape != (RAY_COUNT,):
            raise ValueError(f"r must have shape ({RAY_COUNT},), got {self.r.shape}")
        if not np.all(np.isfinite(self.r)) or np.any(self.r <= 0):
            raise ValueError("all radial distances must be strictly positive and finite")
        if np.any(self.p < 0) or np.any(self.p > 1):
            raise ValueError(f"p must lie in [0,1]^2, got {self.p}")

    @property
    def num_classes(self) -> int:
        return self.class_logits.shape[0] - 1

    @property
    def class_probs(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.class_logits))

    @property
    def score(self) -> float:
        """Highest real-class probability (the null slot excluded)."""
        return float(self.class_probs[:-1].max())

    @property
    def best_class(self) -> int:
        """Argmax over all K+1 slots; equals K for a dropped query."""
        return int(np.argmax(self.class_logits))


@dataclass(frozen=True)
class BinaryMask:
    """Boolean pixel coverage on a fixed raster."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=bool)
        if px.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {px.shape}")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def area(self) -> int:
        return int(self.pixels.sum())

    def is_empty(self) -> bool:
        return not self.pixels.any()


def polygon_vertices(d: ShapeDescriptor, raster_size) -> np.ndarray:
    """Polygon vertices in pixels, shape (64, 2), ordered by ray index.

    raster_size is a scalar for square rasters or an (sx, sy) pair.
    """
    size = np.broadcast_to(np.asarray(raster_size, dtype=np.float64), (2,))
    if np.any(size <= 0):
        raise ValueError(f"raster size must be positive, got {raster_size}")
    dirs = ray_directions(RAY_COUNT)
    return d.p * size + d.r[:, None] * dirs


def _crossing_parity(px: np.ndarray, py: np.ndarray, verts: np.ndarray) -> np.ndarray:
    """Even-odd crossing test for arrays of points against one polygon.

    Half-open rule on y (y1 <= py < y2 counts an upward edge and vice
    versa) with a strict px < x-intersect test, so points on edges get a
    deterministic answer.
    """
    x1 = verts[:, 0]
    y1 = verts[:, 1]
    x2 = np.roll(verts[:, 0], -1)
    y2 = np.roll(verts[:, 1], -1)
    crossings = np.zeros(px.shape, dtype=np.int64)
    for e in range(verts.shape[0]):
        if y1[e] == y2[e]:
            continue
        straddles = ((y1[e] <= py) & (py < y2[e])) | ((y2[e] <= py) & (py < y1[e]))
        if not straddles.any():
            continue
        xint = x1[e] + (py - y1[e]) * (x2[e] - x1[e]) / (y2[e] - y1[e])
        crossings += straddles & (px < xint)
    return crossings % 2 == 1


def rasterize(d: ShapeDescriptor, width: int, height: int) -> BinaryMask:
    """Rasterize a descriptor: pixel covered iff its center is inside the polygon.

    Pixel-center containment under the even-odd rule, clipped to the raster.
    """
    if width < 1 or height < 1:
        raise ValueError(f"raster must be at least 1x1, got {width}x{height}")
    verts = polygon_vertices(d, (width, height))
    out = np.zeros((height, width), dtype=bool)
    x_lo = max(0, int(np.floor(verts[:, 0].min())))
    x_hi = min(width - 1, int(np.ceil(verts[:, 0].max())))
    y_lo = max(0, int(np.floor(verts[:, 1].min())))
    y_hi = min(height - 1, int(np.ceil(verts[:, 1].max())))
    if x_lo > x_hi or y_lo > y_hi:
        return BinaryMask(out)
    xs = np.arange(x_lo, x_hi + 1) + 0.5
    ys = np.arange(y_lo, y_hi + 1) + 0.5
    px, py = np.meshgrid(xs, ys)
    out[y_lo : y_hi + 1, x_lo : x_hi + 1] = _crossing_parity(px, py, verts)
    return BinaryMask(out)


def point_in_mask(m: BinaryMask, p_px) -> bool:
    """True iff the pixel containing p_px (floor of coordinates) is covered."""
    x = int(np.floor(p_px[0]))
    y = int(np.floor(p_px[1]))
    if x < 0 or x >= m.width or y < 0 or y >= m.height:
        return False
    return bool(m.pixels[y, x])


def iou(a: BinaryMask, b: BinaryMask) -> float:
    """Intersection over union; 0 when both masks are empty."""
    if a.pixels.shape != b.pixels.shape:
        raise ValueError(
            f"mask shapes differ: {a.pixels.shape} vs {b.pixels.shape}"
        )
    inter = int((a.pixels & b.pixels).sum())
    union = int((a.pixels | b.pixels).sum())
    if union == 0:
        return 0.0
    return inter / union


def masked_iou(gt: BinaryMask, pred: BinaryMask, gt_union: BinaryMask) -> float:
    """IoU variant insensitive to prediction area on other ground-truth masks.

    |gt n pred| / |gt u (pred \\ gt_union)|: prediction pixels covered by the
    union of all ground-truth masks are dropped from the denominator, so a
    prediction spilling onto a neighboring annotated instance is not
    penalized.
    """
    if gt.pixels.shape != pred.pixels.shape or gt.pixels.shape != gt_union.pixels.shape:
        raise ValueError("all masks must share the same raster shape")
    if np.any(gt.pixels & ~gt_union.pixels):
        raise ValueError("gt must be a subset of gt_union")
    inter = int((gt.pixels & pred.pixels).sum())
    denom = int((gt.pixels | (pred.pixels & ~gt_union.pixels)).sum())
    if denom == 0:
        return 0.0
    return inter / denom


def centroid(m: BinaryMask) -> np.ndarray:
    """Mean of covered pixel centers, shape (2,) in pixels."""
    if m.is_empty():
        raise EmptyMaskError("centroid of an empty mask is undefined")
    ys, xs = np.nonzero(m.pixels)
    return np.array([xs.mean() + 0.5, ys.mean() + 0.5])
