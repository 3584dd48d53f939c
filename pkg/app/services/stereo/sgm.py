"""Semi-global matching on census costs.

The matching cost of left pixel (y, x) at disparity d is the Hamming
distance between its census descriptor and that of right pixel (y, x - d).
Costs are aggregated along eight scanline directions with

    L_r(p, d) = C(p, d) + min(L_r(p-r, d), L_r(p-r, d+-1) + P1, min_k L_r(p-r, k) + P2) - min_k L_r(p-r, k)

and summed before winner-take-all.
"""
import logging
from typing import List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from app.core.errors import InvalidRange, ShapeMismatch
from app.models.camera import CostVolume
from app.models.image import DisparityMap

logger = logging.getLogger(__name__)

PATHS: List[Tuple[int, int]] = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (-1, -1), (1, -1), (-1, 1)]
REFERENCE_CENSUS_BITS = 24


def census_transform(image: np.ndarray, window: int = 5) -> np.ndarray:
    """
    Census descriptor: one bit per window neighbour darker than the center.

    Args:
        image: (H, W) grayscale image
        window: Odd window side; window^2 - 1 must fit in 63 bits

    Returns:
        (H, W) uint64 descriptors (edge-replicated borders)
    """
    if window % 2 == 0 or window * window - 1 > 63:
        raise ValueError("census window must be odd and at most 7")
    half = window // 2
    padded = np.pad(np.asarray(image, dtype=np.float64), half, mode="edge")
    patches = sliding_window_view(padded, (window, window))
    center = patches[:, :, half, half]
    census = np.zeros(center.shape, dtype=np.uint64)
    for i in range(window):
        for j in range(window):
            if i == half and j == half:
                continue
            census = (census << np.uint64(1)) | (patches[:, :, i, j] < center).astype(np.uint64)
    return census


def census_cost_volume(left: np.ndarray, right: np.ndarray, d_min: int, d_max: int, window: int = 5) -> CostVolume:
    """Hamming cost per (y, x, d); disparities pointing outside the right image cost the maximum."""
    if left.shape != right.shape:
        raise ShapeMismatch("left and right images must have equal sizes")
    if d_min >= d_max:
        raise InvalidRange(f"disparity range [{d_min}, {d_max}] is empty")
    bits = window * window - 1
    cl = census_transform(left, window)
    cr = census_transform(right, window)
    h, w = cl.shape
    costs = np.full((h, w, d_max - d_min + 1), bits, dtype=np.int32)
    for k, d in enumerate(range(d_min, d_max + 1)):
        lo, hi = max(0, d), min(w, w + d)
        if lo >= hi:
            continue
        costs[:, lo:hi, k] = np.bitwise_count(cl[:, lo:hi] ^ cr[:, lo - d:hi - d])
    return CostVolume(costs=costs, d_min=d_min, d_max=d_max)


def _step(prev: np.ndarray, cost: np.ndarray, p1: int, p2: int) -> np.ndarray:
    """One recurrence step for a slice of pixels; ``prev`` and ``cost`` are (M, D)."""
    prev_min = prev.min(axis=1, keepdims=True)
    big = np.iinfo(np.int64).max // 4
    minus = np.full_like(prev, big)
    plus = np.full_like(prev, big)
    minus[:, 1:] = prev[:, :-1]
    plus[:, :-1] = prev[:, 1:]
    best = np.minimum(np.minimum(prev, np.minimum(minus, plus) + p1), prev_min + p2)
    return cost + best - prev_min


def aggregate_path(costs: np.ndarray, direction: Tuple[int, int], p1: int, p2: int) -> np.ndarray:
    """
    Aggregated cost L_r along one direction (dx, dy).

    Rows are swept when dy != 0 (each row uses the previous row shifted by
    dx), columns otherwise. Pixels whose predecessor leaves the image start
    a new path with L_r = C.
    """
    dx, dy = direction
    c = costs.astype(np.int64)
    h, w, _ = c.shape
    out = np.empty_like(c)
    if dy == 0:
        cols = range(w) if dx > 0 else range(w - 1, -1, -1)
        prev = None
        for x in cols:
            out[:, x] = c[:, x] if prev is None else _step(prev, c[:, x], p1, p2)
            prev = out[:, x]
        return out
    rows = range(h) if dy > 0 else range(h - 1, -1, -1)
    prev_row = None
    for y in rows:
        if prev_row is None:
            out[y] = c[y]
        elif dx == 0:
            out[y] = _step(prev_row, c[y], p1, p2)
        else:
            row = c[y].copy()
            # predecessor of column x is column x - dx of the previous row
            if dx > 0:
                row[1:] = _step(prev_row[:-1], c[y, 1:], p1, p2)
            else:
                row[:-1] = _step(prev_row[1:], c[y, :-1], p1, p2)
            out[y] = row
        prev_row = out[y]
    return out


def aggregate_costs(volume: CostVolume, p1: float, p2: float, window: int = 5) -> np.ndarray:
    """Sum of the eight path costs; penalties scale with the census bit count."""
    scale = (window * window - 1) / REFERENCE_CENSUS_BITS
    p1_eff = int(round(p1 * scale))
    p2_eff = max(int(round(p2 * scale)), p1_eff)
    total = np.zeros(volume.costs.shape, dtype=np.int64)
    for direction in PATHS:
        total += aggregate_path(volume.costs, direction, p1_eff, p2_eff)
    return total


def _select(costs: np.ndarray, d_min: int, uniqueness: float, subpixel: bool) -> Tuple[np.ndarray, np.ndarray]:
    """Winner-take-all with uniqueness test and optional parabola refinement."""
    h, w, n = costs.shape
    best = np.argmin(costs, axis=2)
    best_cost = np.take_along_axis(costs, best[..., None], axis=2)[..., 0].astype(np.float64)

    d_index = np.arange(n)
    far = np.abs(d_index[None, None, :] - best[..., None]) > 1
    second = np.where(far, costs, np.iinfo(np.int64).max).min(axis=2).astype(np.float64)
    unique = best_cost < (1.0 - uniqueness) * second

    disparity = best.astype(np.float64)
    if subpixel:
        inner = (best > 0) & (best < n - 1)
        lo = np.take_along_axis(costs, np.clip(best - 1, 0, n - 1)[..., None], axis=2)[..., 0].astype(np.float64)
        hi = np.take_along_axis(costs, np.clip(best + 1, 0, n - 1)[..., None], axis=2)[..., 0].astype(np.float64)
        denom = lo - 2.0 * best_cost + hi
        refine = inner & (denom > 0)
        offset = np.where(refine, (lo - hi) / (2.0 * np.where(refine, denom, 1.0)), 0.0)
        disparity += offset
    return disparity + d_min, unique


def sgm(
    left: np.ndarray,
    right: np.ndarray,
    d_min: int = 0,
    d_max: int = 64,
    p1: float = 8.0,
    p2: float = 32.0,
    window: int = 5,
    uniqueness: float = 0.05,
    lr_threshold: float = 1.0,
    subpixel: bool = True,
) -> Tuple[DisparityMap, DisparityMap]:
    """
    Dense disparity of a rectified pair.

    Args:
        left: (H, W) rectified left grayscale image
        right: (H, W) rectified right grayscale image
        d_min: Smallest disparity searched
        d_max: Largest disparity searched
        p1: Penalty for disparity changes of one pixel
        p2: Penalty for larger jumps
        window: Census window side
        uniqueness: Relative margin the best cost must keep over the best
            cost more than one disparity away
        lr_threshold: Left-right consistency tolerance in pixels
        subpixel: Refine the winning disparity with a parabola fit

    Returns:
        Left and right disparity maps in pixels; a pixel of either map is
        valid when it is unique and agrees with its match in the other map
    """
    volume = census_cost_volume(left, right, d_min, d_max, window)
    total = aggregate_costs(volume, p1, p2, window)
    h, w, n = total.shape

    # S_R(y, x, d) = S_L(y, x + d, d)
    big = np.iinfo(np.int64).max // 4
    total_right = np.full_like(total, big)
    for k, d in enumerate(range(d_min, d_max + 1)):
        lo, hi = max(0, -d), min(w, w - d)
        if lo < hi:
            total_right[:, lo:hi, k] = total[:, lo + d:hi + d, k]

    disp_left, unique_left = _select(total, d_min, uniqueness, subpixel)
    disp_right, unique_right = _select(total_right, d_min, uniqueness, subpixel)

    cols = np.arange(w)[None, :]
    target = np.rint(cols - disp_left).astype(np.int64)
    inside = (target >= 0) & (target < w)
    rows = np.arange(h)[:, None].repeat(w, axis=1)
    matched = np.where(inside, disp_right[rows, np.clip(target, 0, w - 1)], np.inf)
    consistent = inside & (np.abs(disp_left - matched) <= lr_threshold)

    # right pixel x matches left pixel x + d_R
    target_r = np.rint(cols + disp_right).astype(np.int64)
    inside_r = (target_r >= 0) & (target_r < w)
    matched_r = np.where(inside_r, disp_left[rows, np.clip(target_r, 0, w - 1)], np.inf)
    consistent_r = inside_r & (np.abs(disp_right - matched_r) <= lr_threshold)

    valid_left = unique_left & consistent
    valid_right = unique_right & consistent_r
    logger.info(
        f"SGM matched {int(valid_left.sum())} of {h * w} pixels in [{d_min}, {d_max}]"
    )
    return (
        DisparityMap(values=disp_left, valid=valid_left, frame="relative"),
        DisparityMap(values=disp_right, valid=valid_right, frame="relative"),
    )


def speckle_filter(disp: DisparityMap, max_size: int = 50, max_diff: float = 1.0) -> DisparityMap:
    """
    Invalidate connected regions smaller than ``max_size`` pixels.

    Two 4-neighbours belong to the same region when both are valid and
    their disparities differ by at most ``max_diff``.
    """
    h, w = disp.values.shape
    values, valid = disp.values, disp.valid
    ids = np.arange(h * w).reshape(h, w)
    with np.errstate(invalid="ignore"):
        horizontal = valid[:, :-1] & valid[:, 1:] & (np.abs(values[:, :-1] - values[:, 1:]) <= max_diff)
        vertical = valid[:-1, :] & valid[1:, :] & (np.abs(values[:-1, :] - values[1:, :]) <= max_diff)
    rows = np.concatenate([ids[:, :-1][horizontal], ids[:-1, :][vertical]])
    cols = np.concatenate([ids[:, 1:][horizontal], ids[1:, :][vertical]])
    graph = coo_matrix((np.ones(rows.size, dtype=np.int8), (rows, cols)), shape=(h * w, h * w))
    _, labels = connected_components(graph, directed=False)
    sizes = np.bincount(labels[valid.ravel()], minlength=labels.max() + 1)
    keep = valid & (sizes[labels].reshape(h, w) >= max_size)
    removed = int(valid.sum() - keep.sum())
    if removed:
        logger.info(f"Speckle filter removed {removed} pixels")
    return DisparityMap(values=values, valid=keep, frame=disp.frame)


def gradient_filter(disp: DisparityMap, image: np.ndarray, threshold: float, window: int = 5) -> DisparityMap:
    """Invalidate matches whose windowed mean Sobel magnitude is below ``threshold``."""
    if threshold <= 0:
        return disp
    gray = np.asarray(image, dtype=np.float64)
    magnitude = np.hypot(ndimage.sobel(gray, axis=1, mode="reflect"), ndimage.sobel(gray, axis=0, mode="reflect"))
    texture = ndimage.uniform_filter(magnitude, size=window, mode="reflect")
    return DisparityMap(values=disp.values, valid=disp.valid & (texture >= threshold), frame=disp.frame)


def regularize(
    disp: DisparityMap,
    image: Optional[np.ndarray] = None,
    speckle_size: int = 50,
    max_diff: float = 1.0,
    gradient_threshold: float = 0.0,
) -> DisparityMap:
    """Speckle removal followed by the optional low-texture gradient filter."""
    out = speckle_filter(disp, speckle_size, max_diff) if speckle_size > 0 else disp
    if image is not None:
        out = gradient_filter(out, image, gradient_threshold)
    return out
