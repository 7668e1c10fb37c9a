"""Star-convex polygon set prediction toolkit.

Instance segmentation of cell nuclei as direct set prediction: each nucleus
is a star-convex polygon (a center plus 64 radial distances). The package
provides the polygon geometry, per-pixel radial bound tables, the bounded
radial-distance loss with bipartite set matching, deterministic decoder
kernels (grid queries, rotary encodings, sliding-tile attention), panoptic
quality metrics, watershed overlap resolution, and a CLI tying it together.
"""

__version__ = "0.1.0"

from .geometry import (
    RAY_COUNT,
    BinaryMask,
    ShapeDescriptor,
    centroid,
    iou,
    masked_iou,
    point_in_mask,
    polygon_vertices,
    rasterize,
    ray_directions,
)
from .bounds import BoundTables, LabelRaster, build_tables, is_foreground, lookup_bounds
from .assignment import CostMatrix, MatchResult, solve

__all__ = [
    "RAY_COUNT",
    "BinaryMask",
    "ShapeDescriptor",
    "BoundTables",
    "LabelRaster",
    "CostMatrix",
    "MatchResult",
    "__version__",
    "build_tables",
    "centroid",
    "iou",
    "is_foreground",
    "lookup_bounds",
    "masked_iou",
    "point_in_mask",
    "polygon_vertices",
    "rasterize",
    "ray_directions",
    "solve",
]
