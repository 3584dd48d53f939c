"""Parametric model of the hexagonal microlens array.

Two coordinate systems describe every lens: pixel coordinates of its
centroid on the sensor and axial hex coordinates (q, r). With the default
"pointy" lattice, rows are interlaced:

    centroid = origin + R(rotation) * pitch * (q + r/2, r * sqrt(3)/2)

The "flat" lattice interlaces columns instead:

    centroid = origin + R(rotation) * pitch * (q * sqrt(3)/2, r + q/2)
"""
import logging
import math
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
from dotenv import dotenv_values

from app.core.errors import EmptyGrid, FormatError, MissingAsset, UnknownLens
from app.models.grid import AxialCoord, GridCalibration, MicrolensGrid

logger = logging.getLogger(__name__)

_SQRT3_2 = math.sqrt(3.0) / 2.0

# Counter-clockwise starting east
AXIAL_DIRECTIONS: List[Tuple[int, int]] = [
    (+1, 0),
    (+1, -1),
    (0, -1),
    (-1, 0),
    (-1, +1),
    (0, +1),
]


def _rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def _lattice_offsets(calib: GridCalibration, q: np.ndarray, r: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if calib.lattice == "pointy":
        local = np.stack([q + r / 2.0, r * _SQRT3_2], axis=-1)
    else:
        local = np.stack([q * _SQRT3_2, r + q / 2.0], axis=-1)
    return calib.pitch * local


def centroids_of(calib: GridCalibration, q: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Vectorised centroid computation; returns (n, 2) pixel positions."""
    local = _lattice_offsets(calib, q, r)
    return np.asarray(calib.origin, dtype=np.float64) + local @ _rotation(calib.rotation).T


def centroid(calib: GridCalibration, a: AxialCoord) -> Tuple[float, float]:
    """Pixel position (x, y) of the lens at axial coordinate ``a``."""
    x, y = centroids_of(calib, np.array([a.q]), np.array([a.r]))[0]
    return (float(x), float(y))


def pixel_to_axial(calib: GridCalibration, x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Nearest lattice coordinate of pixel positions (cube rounding)."""
    p = np.stack([np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)], axis=-1)
    local = (p - np.asarray(calib.origin)) @ _rotation(calib.rotation) / calib.pitch
    if calib.lattice == "pointy":
        r = local[..., 1] / _SQRT3_2
        q = local[..., 0] - r / 2.0
    else:
        q = local[..., 0] / _SQRT3_2
        r = local[..., 1] - q / 2.0
    s = -q - r
    rq, rr, rs = np.round(q), np.round(r), np.round(s)
    dq, dr, ds = np.abs(rq - q), np.abs(rr - r), np.abs(rs - s)
    fix_q = (dq > dr) & (dq > ds)
    fix_r = ~fix_q & (dr > ds)
    rq = np.where(fix_q, -rr - rs, rq)
    rr = np.where(fix_r, -rq - rs, rr)
    return rq.astype(np.int64), rr.astype(np.int64)


def _lattice_coords(calib: GridCalibration) -> Tuple[np.ndarray, np.ndarray]:
    """Row-major (q, r) of the rows x cols lattice laid out as a rectangle."""
    rows, cols = np.meshgrid(np.arange(calib.rows), np.arange(calib.cols), indexing="ij")
    if calib.lattice == "pointy":
        r = rows.ravel()
        q = cols.ravel() - r // 2
    else:
        q = cols.ravel()
        r = rows.ravel() - q // 2
    return q, r


def window_inside(centroids: np.ndarray, size: int, width: int, height: int) -> np.ndarray:
    """True where the size x size window around round(centroid) fits in the image."""
    half = size // 2
    c = np.floor(np.asarray(centroids, dtype=np.float64) + 0.5)
    return (
        (c[:, 0] - half >= 0)
        & (c[:, 1] - half >= 0)
        & (c[:, 0] - half + size <= width)
        & (c[:, 1] - half + size <= height)
    )


def build_grid(calib: GridCalibration, crop_size: int = 0) -> MicrolensGrid:
    """
    Enumerate the lattice and keep the lenses that lie on the sensor.

    Args:
        calib: Grid calibration
        crop_size: When positive, keep only lenses whose full crop window fits
            inside the sensor; otherwise keep lenses whose centroid is inside

    Returns:
        MicrolensGrid in row-major lattice order
    """
    q, r = _lattice_coords(calib)
    cents = centroids_of(calib, q, r)
    if crop_size > 0:
        keep = window_inside(cents, crop_size, calib.sensor_width, calib.sensor_height)
    else:
        keep = (
            (cents[:, 0] >= 0)
            & (cents[:, 1] >= 0)
            & (cents[:, 0] <= calib.sensor_width - 1)
            & (cents[:, 1] <= calib.sensor_height - 1)
        )
    if not np.any(keep):
        raise EmptyGrid("no microlens of the lattice falls inside the sensor")

    grid = MicrolensGrid(
        calibration=calib,
        axial=np.stack([q[keep], r[keep]], axis=1).astype(np.int64),
        centroids=cents[keep],
    )
    logger.info(f"Built microlens grid: {len(grid)} of {calib.rows * calib.cols} lenses on sensor")
    return grid


def hex_ring(a: AxialCoord, ring: int) -> List[AxialCoord]:
    """All 6*ring coordinates at hex distance ``ring`` from ``a``, starting east."""
    q = a.q + ring * AXIAL_DIRECTIONS[0][0]
    r = a.r + ring * AXIAL_DIRECTIONS[0][1]
    out = []
    for side in range(6):
        dq, dr = AXIAL_DIRECTIONS[(side + 2) % 6]
        for _ in range(ring):
            out.append(AxialCoord.of(q, r))
            q, r = q + dq, r + dr
    return out


def ring_neighbors(grid: MicrolensGrid, a: AxialCoord, ring: int) -> List[AxialCoord]:
    """
    Coordinates of the hex ring around ``a`` that exist in the grid.

    Args:
        grid: Microlens grid
        a: Center lens
        ring: Ring index (1 = the six adjacent lenses)

    Returns:
        Ring coordinates in counter-clockwise order starting east
    """
    if ring < 1:
        raise ValueError("ring must be >= 1")
    if a not in grid:
        raise UnknownLens(f"lens ({a.q}, {a.r}) is not in the grid")
    return [c for c in hex_ring(a, ring) if c in grid]


def hex_distance(a: AxialCoord, b: AxialCoord) -> int:
    dq, dr = a.q - b.q, a.r - b.r
    return int(max(abs(dq), abs(dr), abs(dq + dr)))


def load_grid_calibration(path: Union[str, Path], lattice: str = "pointy") -> GridCalibration:
    """
    Read a key-value grid calibration file.

    Keys: origin_x, origin_y, pitch_px, rotation_rad, rows, cols, sensor_w, sensor_h
    and optionally lattice.
    """
    if not Path(path).is_file():
        raise MissingAsset(f"grid calibration not found: {path}")
    values = dotenv_values(path)
    try:
        return GridCalibration(
            origin=(float(values["origin_x"]), float(values["origin_y"])),
            pitch=float(values["pitch_px"]),
            rotation=float(values.get("rotation_rad") or 0.0),
            rows=int(values["rows"]),
            cols=int(values["cols"]),
            sensor_width=int(values["sensor_w"]),
            sensor_height=int(values["sensor_h"]),
            lattice=values.get("lattice") or lattice,
        )
    except (KeyError, TypeError, ValueError) as e:
        logger.error(f"Invalid grid calibration {path}: {str(e)}")
        raise FormatError(f"invalid grid calibration file {path}: {str(e)}") from e


def save_grid_calibration(calib: GridCalibration, path: Union[str, Path]) -> None:
    lines = [
        f"origin_x={calib.origin[0]!r}",
        f"origin_y={calib.origin[1]!r}",
        f"pitch_px={calib.pitch!r}",
        f"rotation_rad={calib.rotation!r}",
        f"rows={calib.rows}",
        f"cols={calib.cols}",
        f"sensor_w={calib.sensor_width}",
        f"sensor_h={calib.sensor_height}",
        f"lattice={calib.lattice}",
    ]
    Path(path).write_text("\n".join(lines) + "\n")
