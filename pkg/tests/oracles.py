"""Independent oracle implementations the tests check the library against.

Each oracle recomputes a quantity through a different code path than the
library: textbook scalar loops instead of vectorized kernels, exhaustive
enumeration instead of solvers, sampling instead of incremental traversal.
"""

import itertools

import numpy as np
from numba import njit


def point_in_polygon(px: float, py: float, verts: np.ndarray) -> bool:
    """Classic crossing-number test, one point at a time.

    Same half-open edge convention as the library rasterizer (upward edge
    includes its lower endpoint, strict x comparison).
    """
    crossings = 0
    n = verts.shape[0]
    for e in range(n):
        x1, y1 = verts[e]
        x2, y2 = verts[(e + 1) % n]
        if y1 == y2:
            continue
        if (y1 <= py < y2) or (y2 <= py < y1):
            xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
            if px < xint:
                crossings += 1
    return crossings % 2 == 1


def rasterize_oracle(verts: np.ndarray, width: int, height: int) -> np.ndarray:
    out = np.zeros((height, width), dtype=bool)
    for y in range(height):
        for x in range(width):
            out[y, x] = point_in_polygon(x + 0.5, y + 0.5, verts)
    return out


@njit(cache=True)
def _march_kernel(ids, dirs, step, r_min, r_max):
    height, width = ids.shape
    for y in range(height):
        for x in range(width):
            own = ids[y, x]
            if own <= 0:
                continue
            ox = x + 0.5
            oy = y + 0.5
            for k in range(dirs.shape[0]):
                dx = dirs[k, 0]
                dy = dirs[k, 1]
                prev_fx = x
                prev_fy = y
                have_min = False
                have_max = False
                t = 0.0
                t_lim = 2.0 * (width + height)
                while t < t_lim and not (have_min and have_max):
                    t += step
                    fx = int(np.floor(ox + t * dx))
                    fy = int(np.floor(oy + t * dy))
                    if fx == prev_fx and fy == prev_fy:
                        continue
                    # exact crossing parameters for the changed axes
                    tx = np.inf
                    ty = np.inf
                    if fx != prev_fx:
                        bx = prev_fx + 1.0 if dx > 0 else float(prev_fx)
                        tx = (bx - ox) / dx
                    if fy != prev_fy:
                        by = prev_fy + 1.0 if dy > 0 else float(prev_fy)
                        ty = (by - oy) / dy
                    # up to two square entries this step, in crossing order;
                    # a near-tie is a diagonal corner crossing (single entry,
                    # same convention as the library traversal)
                    if tx < ty - 1e-9:
                        ev_t = (tx, ty)
                        ev_x = (fx, fx)
                        ev_y = (prev_fy, fy)
                        n_ev = 1 if ty == np.inf else 2
                    elif ty < tx - 1e-9:
                        ev_t = (ty, tx)
                        ev_x = (prev_fx, fx)
                        ev_y = (fy, fy)
                        n_ev = 1 if tx == np.inf else 2
                    else:
                        ev_t = (min(tx, ty), min(tx, ty))
                        ev_x = (fx, fx)
                        ev_y = (fy, fy)
                        n_ev = 1
                    for ev in range(n_ev):
                        tc = ev_t[ev]
                        cx = ev_x[ev]
                        cy = ev_y[ev]
                        if cx < 0 or cx >= width or cy < 0 or cy >= height:
                            if not have_min:
                                r_min[y, x, k] = tc
                                have_min = True
                            if not have_max:
                                r_max[y, x, k] = np.inf
                                have_max = True
                            break
                        pid = ids[cy, cx]
                        if not have_min and pid != own:
                            r_min[y, x, k] = tc
                            have_min = True
                        if not have_max and pid == 0:
                            r_max[y, x, k] = tc
                            have_max = True
                        if have_min and have_max:
                            break
                    if have_min and have_max:
                        break
                    if (
                        ox + t * dx < -1.0
                        or ox + t * dx > width + 1.0
                        or oy + t * dy < -1.0
                        or oy + t * dy > height + 1.0
                    ):
                        break
                    prev_fx = fx
                    prev_fy = fy


def march_bounds(ids: np.ndarray, dirs: np.ndarray, step: float = 0.05):
    """Fine-step ray-marching bound tables.

    Marches every foreground pixel/ray in `step`-sized increments; when a
    sample lands in a new pixel square, the exact crossing parameter is
    recovered from the floor change, so sub-step corner clips are not
    skipped.
    """
    height, width = ids.shape
    r_min = np.zeros((height, width, dirs.shape[0]))
    r_max = np.zeros((height, width, dirs.shape[0]))
    _march_kernel(ids.astype(np.int32), dirs, step, r_min, r_max)
    return r_min, r_max


def brute_force_assignment(costs: np.ndarray):
    """Exhaustive minimum over all injective row -> column maps."""
    m, n = costs.shape
    best_total = np.inf
    best_perm = None
    for perm in itertools.permutations(range(n), m):
        total = sum(costs[j, perm[j]] for j in range(m))
        if total < best_total:
            best_total = total
            best_perm = perm
    return best_perm, best_total


def brute_force_edt(mask: np.ndarray) -> np.ndarray:
    """Per-pixel min center distance to any uncovered pixel."""
    height, width = mask.shape
    out = np.zeros((height, width))
    bg = np.argwhere(~mask)
    for y in range(height):
        for x in range(width):
            if not mask[y, x]:
                continue
            if bg.size == 0:
                out[y, x] = np.inf
            else:
                out[y, x] = np.sqrt(((bg - (y, x)) ** 2).sum(axis=1)).min()
    return out


def best_iou_pairing(scores: np.ndarray, threshold: float = 0.5):
    """Exhaustive total-score-optimal pairing and its thresholded TP set."""
    m, n = scores.shape
    best = (-1.0, ())
    k = min(m, n)
    for rows in itertools.permutations(range(m), k):
        for cols in itertools.permutations(range(n), k):
            total = sum(scores[r, c] for r, c in zip(rows, cols))
            if total > best[0]:
                best = (total, tuple(zip(rows, cols)))
    tp = tuple((r, c) for r, c in best[1] if scores[r, c] > threshold)
    return best[0], tp
