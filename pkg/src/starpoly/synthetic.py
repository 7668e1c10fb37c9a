"""Seeded synthetic scenes: noise images and blobby label rasters.

Used by the CLI's --synthetic mode, the benchmark, and the test suite.
Instances are rasterized random star-convex blobs; later blobs overwrite
earlier ones, which produces the touching/overlapping id transitions the
radial bounds have to cope with.
"""

import numpy as np
from scipy import ndimage

from .bounds import LabelRaster
from .geometry import RAY_COUNT, ShapeDescriptor, rasterize


def synthetic_image(side: int, seed) -> np.ndarray:
    """Blocky low-frequency RGB field plus fine noise, in [0, 1].

    Bit-deterministic per (side, seed). The coarse 32-px structure survives
    the feature extractor's pooling, so different grid queries see different
    features.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(side)]))
    cells = side // 32
    coarse = rng.random(size=(cells, cells, 3))
    fine = rng.random(size=(side, side, 3))
    image = 0.75 * np.repeat(np.repeat(coarse, 32, axis=0), 32, axis=1) + 0.25 * fine
    return image


def random_blob(rng, center, base_radius: float) -> ShapeDescriptor:
    """Smooth star-convex blob: base radius modulated by low harmonics."""
    angles = 2.0 * np.pi * np.arange(RAY_COUNT) / RAY_COUNT
    wobble = np.zeros(RAY_COUNT)
    for harmonic in (1, 2, 3):
        wobble += rng.normal() * np.cos(harmonic * angles) * 0.12
        wobble += rng.normal() * np.sin(harmonic * angles) * 0.12
    radii = np.maximum(base_radius * (1.0 + wobble), 0.5)
    return ShapeDescriptor(np.asarray(center, dtype=np.float64), radii)


def random_label_raster(
    width: int,
    height: int,
    seed,
    max_instances: int = 6,
    radius_range=(2.0, 6.0),
    separated: bool = False,
    interior_only: bool = False,
    class_names=("nucleus",),
    resolution: float = 0.25,
) -> LabelRaster:
    """Random flat label raster with up to max_instances blobs.

    separated keeps at least one background pixel between instances (and
    implies no touching), interior_only keeps instances off the frame.
    """
    rng = np.random.default_rng(seed)
    ids = np.zeros((height, width), dtype=np.int32)
    classes = {}
    count = int(rng.integers(1, max_instances + 1))
    next_id = 1
    for _ in range(count):
        for _attempt in range(20):
            radius = rng.uniform(*radius_range)
            if interior_only:
                margin = (radius * 1.4 + 1.5) / min(width, height)
                if margin >= 0.5:
                    break
                center = rng.uniform(margin, 1.0 - margin, size=2)
            else:
                center = rng.uniform(0.0, 1.0, size=2)
            blob = random_blob(rng, center, radius)
            mask = rasterize(blob, width, height).pixels
            if not mask.any():
                continue
            if interior_only and (
                mask[0].any() or mask[-1].any() or mask[:, 0].any() or mask[:, -1].any()
            ):
                continue
            if separated:
                grown = ndimage.binary_dilation(mask, structure=np.ones((3, 3)))
                if (grown & (ids > 0)).any():
                    continue
            ids[mask] = next_id
            classes[next_id] = class_names[(next_id - 1) % len(class_names)]
            next_id += 1
            break
    # overwriting can erase an earlier instance entirely; drop its class
    surviving = set(np.unique(ids).tolist()) - {0}
    classes = {i: c for i, c in classes.items() if i in surviving}
    return LabelRaster(ids, classes, resolution)
