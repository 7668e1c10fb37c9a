"""Per-pixel, per-ray radial distance bound tables.

For every foreground pixel center and each of the 64 ray directions the
tables store the plausible range [r_min, r_max] for a predicted radial
distance:

* r_min: ray parameter at the first exit from the coverage of the instance
  occupying the pixel, capped by the exit from the image frame;
* r_max: ray parameter at the first entry into a pixel square covered by no
  instance, or +inf when the ray reaches the frame without meeting
  background.

Pixels are unit squares [x, x+1) x [y, y+1); crossings are computed by exact
axis-aligned grid traversal, so the tables are exactly defined (step-based
marching can skip corner-clipped squares).
"""

import io
import struct
from dataclasses import dataclass

import numpy as np
from numba import njit

from .geometry import RAY_COUNT, ray_directions
from .runtime import apply_thread_cap

TABLE_MAGIC = b"LSPB"
TABLE_VERSION = 1

# Crossing parameters closer than this count as one corner crossing (the ray
# steps diagonally, touching the two side squares only at a point). Diagonal
# rays from pixel centers pass exactly through lattice corners, but cos/sin
# of the diagonal angles differ by one ulp, so exact ties must be tolerant.
CORNER_TIE_EPS = 1e-9


@dataclass(frozen=True)
class LabelRaster:
    """Flat instance map: 0 is background, ids >= 1 are instances.

    classes maps every instance id to its class name; resolution is the
    physical pixel size in micrometers per pixel.
    """

    ids: np.ndarray
    classes: dict
    resolution: float

    def __post_init__(self):
        ids = np.asarray(self.ids)
        if ids.ndim != 2 or not np.issubdtype(ids.dtype, np.integer):
            raise ValueError("ids must be a 2-D integer array")
        if ids.min(initial=0) < 0:
            raise ValueError("instance ids must be non-negative")
        object.__setattr__(self, "ids", ids.astype(np.int32))
        if self.resolution <= 0:
            raise ValueError(f"resolution must be positive, got {self.resolution}")
        present = set(np.unique(ids).tolist()) - {0}
        missing = present - set(self.classes)
        if missing:
            raise ValueError(f"instance ids without a class label: {sorted(missing)}")

    @property
    def height(self) -> int:
        return self.ids.shape[0]

    @property
    def width(self) -> int:
        return self.ids.shape[1]

    @property
    def instance_ids(self) -> list:
        ids = np.unique(self.ids)
        return [int(i) for i in ids if i > 0]


@dataclass(frozen=True)
class BoundTables:
    """r_min/r_max arrays of shape (height, width, 64), +inf allowed in r_max."""

    r_min: np.ndarray
    r_max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.r_min, dtype=np.float64)
        hi = np.asarray(self.r_max, dtype=np.float64)
        if lo.shape != hi.shape or lo.ndim != 3 or lo.shape[2] != RAY_COUNT:
            raise ValueError(
                f"tables must share shape (H, W, {RAY_COUNT}), got {lo.shape} / {hi.shape}"
            )
        object.__setattr__(self, "r_min", lo)
        object.__setattr__(self, "r_max", hi)

    @property
    def height(self) -> int:
        return self.r_min.shape[0]

    @property
    def width(self) -> int:
        return self.r_min.shape[1]


@njit(cache=True)
def _trace_kernel(ids, dirs, r_min, r_max):
    height, width = ids.shape
    nrays = dirs.shape[0]
    for y in range(height):
        for x in range(width):
            own = ids[y, x]
            if own <= 0:
                continue
            ox = x + 0.5
            oy = y + 0.5
            for k in range(nrays):
                dx = dirs[k, 0]
                dy = dirs[k, 1]
                # Amanatides-Woo traversal with exact crossing parameters.
                cx = x
                cy = y
                if dx > 0.0:
                    step_x = 1
                    t_max_x = (cx + 1.0 - ox) / dx
                    t_delta_x = 1.0 / dx
                elif dx < 0.0:
                    step_x = -1
                    t_max_x = (cx - ox) / dx
                    t_delta_x = -1.0 / dx
                else:
                    step_x = 0
                    t_max_x = np.inf
                    t_delta_x = np.inf
                if dy > 0.0:
                    step_y = 1
                    t_max_y = (cy + 1.0 - oy) / dy
                    t_delta_y = 1.0 / dy
                elif dy < 0.0:
                    step_y = -1
                    t_max_y = (cy - oy) / dy
                    t_delta_y = -1.0 / dy
                else:
                    step_y = 0
                    t_max_y = np.inf
                    t_delta_y = np.inf
                have_min = False
                have_max = False
                while True:
                    if t_max_x < t_max_y - CORNER_TIE_EPS:
                        t = t_max_x
                        cx += step_x
                        t_max_x += t_delta_x
                    elif t_max_y < t_max_x - CORNER_TIE_EPS:
                        t = t_max_y
                        cy += step_y
                        t_max_y += t_delta_y
                    else:
                        # corner crossing: step diagonally
                        t = min(t_max_x, t_max_y)
                        cx += step_x
                        cy += step_y
                        t_max_x += t_delta_x
                        t_max_y += t_delta_y
                    if cx < 0 or cx >= width or cy < 0 or cy >= height:
                        if not have_min:
                            r_min[y, x, k] = t
                        if not have_max:
                            r_max[y, x, k] = np.inf
                        break
                    pid = ids[cy, cx]
                    if not have_min and pid != own:
                        r_min[y, x, k] = t
                        have_min = True
                    if not have_max and pid == 0:
                        r_max[y, x, k] = t
                        have_max = True
                    if have_min and have_max:
                        break


def build_tables(labels: LabelRaster) -> BoundTables:
    """Build the r_min/r_max tables for every foreground pixel and ray.

    Background pixels keep 0 in both tables (the loss never reads them).
    """
    apply_thread_cap()
    dirs = ray_directions(RAY_COUNT)
    r_min = np.zeros((labels.height, labels.width, RAY_COUNT))
    r_max = np.zeros((labels.height, labels.width, RAY_COUNT))
    _trace_kernel(labels.ids, dirs, r_min, r_max)
    return BoundTables(r_min, r_max)


def fixed_boundary_mode(tables: BoundTables) -> BoundTables:
    """Collapse the plausible range by forcing r_max = r_min everywhere."""
    return BoundTables(tables.r_min, tables.r_min.copy())


def _bilinear_cell(width, height, p_px):
    """Indices and weights of the four pixel centers around p_px (clamped)."""
    u = p_px[0] - 0.5
    v = p_px[1] - 0.5
    x0 = int(np.floor(u))
    y0 = int(np.floor(v))
    fx = u - x0
    fy = v - y0
    xs = (max(0, min(width - 1, x0)), max(0, min(width - 1, x0 + 1)))
    ys = (max(0, min(height - 1, y0)), max(0, min(height - 1, y0 + 1)))
    weights = (
        (1.0 - fx) * (1.0 - fy),
        fx * (1.0 - fy),
        (1.0 - fx) * fy,
        fx * fy,
    )
    cells = ((xs[0], ys[0]), (xs[1], ys[0]), (xs[0], ys[1]), (xs[1], ys[1]))
    return cells, weights


def lookup_bounds(tables: BoundTables, p_px) -> tuple:
    """Bilinearly interpolated (r_min, r_max) rows at a continuous point.

    Any +inf r_max neighbor with nonzero weight makes the interpolated value
    +inf: averaging a finite number into an infinite bound would manufacture
    a spurious upper constraint.
    """
    x, y = float(p_px[0]), float(p_px[1])
    if x < 0 or x >= tables.width or y < 0 or y >= tables.height:
        raise ValueError(f"point {p_px} outside the {tables.width}x{tables.height} raster")
    cells, weights = _bilinear_cell(tables.width, tables.height, (x, y))
    lo = np.zeros(RAY_COUNT)
    hi = np.zeros(RAY_COUNT)
    hi_inf = np.zeros(RAY_COUNT, dtype=bool)
    for (cx, cy), w in zip(cells, weights):
        if w == 0.0:
            continue
        lo += w * tables.r_min[cy, cx]
        hi_row = tables.r_max[cy, cx]
        row_inf = ~np.isfinite(hi_row)
        hi_inf |= row_inf
        hi += np.where(row_inf, 0.0, w * hi_row)
    hi[hi_inf] = np.inf
    return lo, hi


def is_foreground(labels: LabelRaster, p_px) -> bool:
    """True iff the pixel containing p_px belongs to some instance."""
    x = int(np.floor(p_px[0]))
    y = int(np.floor(p_px[1]))
    if x < 0 or x >= labels.width or y < 0 or y >= labels.height:
        return False
    return bool(labels.ids[y, x] >= 1)


def write_tables(tables: BoundTables, path) -> None:
    """Serialize tables: LSPB header then row-major little-endian float32.

    r_min first, r_max second; +inf keeps the standard 32-bit infinity bit
    pattern.
    """
    header = TABLE_MAGIC + struct.pack(
        "<IIII", TABLE_VERSION, tables.width, tables.height, RAY_COUNT
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(tables.r_min.astype("<f4").tobytes())
        fh.write(tables.r_max.astype("<f4").tobytes())


def read_tables(path) -> BoundTables:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 20 or data[:4] != TABLE_MAGIC:
        raise ValueError(f"{path}: not a bound-table file (bad magic)")
    version, width, height, nrays = struct.unpack("<IIII", data[4:20])
    if version != TABLE_VERSION:
        raise ValueError(f"{path}: unsupported table version {version}")
    if nrays != RAY_COUNT:
        raise ValueError(f"{path}: expected {RAY_COUNT} rays, found {nrays}")
    expect = 20 + 2 * 4 * width * height * nrays
    if len(data) != expect:
        raise ValueError(f"{path}: truncated table file ({len(data)} of {expect} bytes)")
    count = width * height * nrays
    body = np.frombuffer(data, dtype="<f4", offset=20)
    r_min = body[:count].astype(np.float64).reshape(height, width, nrays)
    r_max = body[count:].astype(np.float64).reshape(height, width, nrays)
    return BoundTables(r_min, r_max)
