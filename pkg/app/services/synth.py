"""Synthetic plenoptic and stereo scenes with exact ground truth.

The plenoptic camera frame is the world frame and coincides with the left
stereo camera. Microlens i is a pinhole at lateral position
(c_i - sensor_center) * lens_baseline / pitch on the z = 0 plane; sensor
pixel (u, v) belongs to the lens whose hexagon contains it and looks along
((u - c_ix) / f_mu, (v - c_iy) / f_mu, 1). Two adjacent lenses therefore see
a plane at depth z shifted by lens_baseline * f_mu / z pixels.

The central view used for dense maps is orthographic: sensor pixel (u, v)
looks straight down z from lateral position (p - sensor_center) *
lens_baseline / pitch, so it agrees with the centroid ray of every lens.
"""
import logging
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.ndimage import map_coordinates

from app.core.errors import InvalidRange
from app.models.camera import CameraIntrinsics, StereoRig
from app.models.grid import GridCalibration, MicrolensGrid
from app.models.image import DepthMap, DisparityMap, RawBayerImage, RgbImage
from app.models.pipeline import PipelineConfig
from app.models.scene import SyntheticScene, TexturedPlane
from app.models.stack import SparseDepthMap
from app.services.alignment import RigLike, focal_baseline
from app.services.hexgrid import build_grid, centroids_of, pixel_to_axial, save_grid_calibration
from app.services.image_io import (
    write_depth_pfm,
    write_disparity_pfm,
    write_pfm,
    write_ppm,
    write_raw_bayer,
    write_sparse_csv,
)
from app.services.lfs import metric_to_virtual
from app.services.pipeline import save_config
from app.services.plenoptic import mosaic
from app.services.stereo.rectification import save_rig_calibration

logger = logging.getLogger(__name__)

NOISE_PERIOD = 256
TEXTURE_OCTAVES = 5
UNIFORM_GREY = 0.5


def value_noise(x: np.ndarray, y: np.ndarray, seed: int, channels: int = 3) -> np.ndarray:
    """
    Seeded value noise: a periodic random lattice sampled bilinearly.

    Args:
        x: Lattice coordinates along x (any shape)
        y: Lattice coordinates along y (same shape)
        seed: Lattice seed
        channels: Independent noise layers

    Returns:
        (channels, *x.shape) values in [0.1, 0.9]
    """
    lattice = np.random.default_rng(seed).uniform(0.1, 0.9, size=(channels, NOISE_PERIOD, NOISE_PERIOD))
    coords = np.stack([np.ravel(y), np.ravel(x)])
    out = np.stack([map_coordinates(layer, coords, order=1, mode="grid-wrap") for layer in lattice])
    return out.reshape((channels,) + np.shape(x))


def plane_color(plane: TexturedPlane, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """RGB of the plane at world positions (x, y); (3, *x.shape)."""
    if not plane.textured:
        return np.full((3,) + np.shape(x), UNIFORM_GREY)
    # octave k has cells 2^-k of the base scale and weight 2^-k
    total = np.zeros((3,) + np.shape(x))
    weights = 0.0
    for k in range(TEXTURE_OCTAVES):
        freq = 2.0 ** k / plane.texture_scale_m
        total += value_noise(x * freq, y * freq, plane.texture_seed * TEXTURE_OCTAVES + k) / 2.0 ** k
        weights += 1.0 / 2.0 ** k
    return total / weights


def cast_rays(scene: SyntheticScene, origins: np.ndarray, directions: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Intersect rays with the scene planes.

    Args:
        scene: Scene whose planes are sorted nearest first
        origins: (..., 3) ray origins in the world frame
        directions: (..., 3) ray directions with positive z

    Returns:
        (points (..., 3), colors (3, ...), hit mask) where unhit rays carry
        NaN points and black colour
    """
    shape = origins.shape[:-1]
    points = np.full(shape + (3,), np.nan)
    colors = np.zeros((3,) + shape)
    hit = np.zeros(shape, dtype=bool)
    for plane in scene.planes:
        s = (plane.depth_m - origins[..., 2]) / directions[..., 2]
        p = origins + s[..., None] * directions
        x0, x1, y0, y1 = plane.extent
        on = ~hit & (s > 0) & (p[..., 0] >= x0) & (p[..., 0] <= x1) & (p[..., 1] >= y0) & (p[..., 1] <= y1)
        if not np.any(on):
            continue
        points[on] = p[on]
        colors[:, on] = plane_color(plane, p[on, 0], p[on, 1])
        hit |= on
    return points, colors, hit


def _sensor_center(calib: GridCalibration) -> np.ndarray:
    return np.array([(calib.sensor_width - 1) / 2.0, (calib.sensor_height - 1) / 2.0])


def lens_positions(scene: SyntheticScene, calib: GridCalibration, centroids: np.ndarray) -> np.ndarray:
    """World (x, y) of the microlens pinholes at the given centroids."""
    return (np.asarray(centroids, dtype=np.float64) - _sensor_center(calib)) * scene.world_per_pixel(calib.pitch)


def exact_sparse_depth(scene: SyntheticScene, grid: MicrolensGrid) -> SparseDepthMap:
    """Depth along every centroid ray; lenses whose ray misses all planes are absent."""
    lateral = lens_positions(scene, grid.calibration, grid.centroids)
    origins = np.concatenate([lateral, np.zeros((len(grid), 1))], axis=1)
    directions = np.tile([0.0, 0.0, 1.0], (len(grid), 1))
    points, _, hit = cast_rays(scene, origins, directions)
    if not np.any(hit):
        return SparseDepthMap.empty("synthetic")
    return SparseDepthMap(
        coords=grid.axial[hit],
        centroids=grid.centroids[hit],
        depths=points[hit, 2],
        source="synthetic",
    )


def render_plenoptic_rgb(scene: SyntheticScene, grid: MicrolensGrid) -> Tuple[RgbImage, SparseDepthMap]:
    """Render every sensor pixel through the pinhole of its microlens."""
    calib = grid.calibration
    h, w = calib.sensor_height, calib.sensor_width
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    q, r = pixel_to_axial(calib, u, v)
    cents = centroids_of(calib, q.ravel(), r.ravel()).reshape(h, w, 2)
    lateral = lens_positions(scene, calib, cents)
    f = scene.microlens_focal_px
    origins = np.concatenate([lateral, np.zeros((h, w, 1))], axis=-1)
    directions = np.stack([(u - cents[..., 0]) / f, (v - cents[..., 1]) / f, np.ones_like(u)], axis=-1)
    _, colors, hit = cast_rays(scene, origins, directions)
    sparse = exact_sparse_depth(scene, grid)
    logger.info(f"Rendered plenoptic image {w}x{h}: {int(hit.sum())} pixels hit, {len(sparse)} lens depths")
    return RgbImage(data=np.clip(colors, 0.0, 1.0)), sparse


def render_plenoptic(
    scene: SyntheticScene,
    grid: MicrolensGrid,
    pattern: str = "RGGB",
) -> Tuple[RawBayerImage, SparseDepthMap]:
    """
    Render a raw plenoptic capture of the scene.

    Args:
        scene: Planes and microlens projection parameters
        grid: Microlens grid of the sensor
        pattern: Bayer pattern of the mosaic

    Returns:
        16-bit Bayer mosaic and the exact depth of every centroid ray
    """
    rgb, sparse = render_plenoptic_rgb(scene, grid)
    return mosaic(rgb.data, pattern), sparse


def render_central_view(scene: SyntheticScene, calib: GridCalibration) -> Tuple[RgbImage, DepthMap]:
    """Orthographic central view on the sensor grid: natural image and its depth."""
    h, w = calib.sensor_height, calib.sensor_width
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    lateral = lens_positions(scene, calib, np.stack([u, v], axis=-1))
    origins = np.concatenate([lateral, np.zeros((h, w, 1))], axis=-1)
    directions = np.broadcast_to(np.array([0.0, 0.0, 1.0]), origins.shape)
    points, colors, hit = cast_rays(scene, origins, directions)
    depth = DepthMap(values=np.where(hit, points[..., 2], 0.0), valid=hit)
    return RgbImage(data=np.clip(colors, 0.0, 1.0)), depth


def render_relative_disparity(
    scene: SyntheticScene,
    m_star: float,
    b_star: float,
    rig: RigLike,
    calib: GridCalibration,
) -> DisparityMap:
    """
    Dense relative disparity whose correct alignment is exactly (m_star, b_star).

    Every pixel of the central view holds x = (f * B / z - b_star) / m_star;
    pixels seeing no plane are invalid.
    """
    if m_star == 0:
        raise InvalidRange("the relative disparity scale must be non-zero")
    _, depth = render_central_view(scene, calib)
    fb = focal_baseline(rig)
    values = np.full(depth.values.shape, np.nan)
    values[depth.valid] = (fb / depth.values[depth.valid] - b_star) / m_star
    return DisparityMap(values=values, valid=depth.valid, frame="relative")


def _camera_rays(
    intr: CameraIntrinsics,
    rotation: np.ndarray,
    translation: np.ndarray,
    size: Tuple[int, int],
) -> Tuple[np.ndarray, np.ndarray]:
    """World-frame origins and directions of a pinhole camera (X_cam = R X_world + t)."""
    w, h = size
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    cam = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1)
    directions = cam @ rotation
    center = -rotation.T @ translation
    return np.broadcast_to(center, directions.shape), directions


def render_stereo_rgb(
    scene: SyntheticScene,
    rig: Optional[StereoRig] = None,
    size: Optional[Tuple[int, int]] = None,
) -> Tuple[RgbImage, RgbImage, DepthMap]:
    """
    Pinhole renders of both stereo cameras and the exact left depth.

    Args:
        scene: Scene; its rig is used when ``rig`` is None
        rig: Stereo rig in the world (left camera) frame
        size: (width, height); defaults to twice the left principal point plus one

    Returns:
        Left image, right image and the left-camera depth map
    """
    rig = rig or scene.rig
    if rig is None:
        raise InvalidRange("scene has no stereo rig")
    if size is None:
        size = (int(round(2 * rig.left.cx + 1)), int(round(2 * rig.left.cy + 1)))
    images = []
    depth = None
    for intr, rotation, translation in (
        (rig.left, np.eye(3), np.zeros(3)),
        (rig.right, rig.rotation, rig.translation),
    ):
        origins, directions = _camera_rays(intr, rotation, translation, size)
        points, colors, hit = cast_rays(scene, origins, directions)
        images.append(RgbImage(data=np.clip(colors, 0.0, 1.0)))
        if depth is None:
            depth = DepthMap(values=np.where(hit, points[..., 2], 0.0), valid=hit)
    logger.info(f"Rendered stereo pair {size[0]}x{size[1]} with baseline {rig.baseline_m} m")
    return images[0], images[1], depth


def render_stereo(
    scene: SyntheticScene,
    rig: Optional[StereoRig] = None,
    size: Optional[Tuple[int, int]] = None,
    pattern: str = "RGGB",
) -> Tuple[RawBayerImage, RawBayerImage, DepthMap]:
    """Raw Bayer stereo pair plus the exact left depth."""
    left, right, depth = render_stereo_rgb(scene, rig, size)
    return mosaic(left.data, pattern), mosaic(right.data, pattern), depth


def synthetic_plenoptic_intrinsics(scene: SyntheticScene, calib: GridCalibration) -> CameraIntrinsics:
    """
    Pinhole that reproduces the central view on the plane at the mean scene depth.

    With f = Z0 * pitch / lens_baseline a point at depth Z0 projects onto the
    same sensor pixel as in the orthographic central view.
    """
    z0 = float(np.mean([p.depth_m for p in scene.planes]))
    focal = z0 / scene.world_per_pixel(calib.pitch)
    cx, cy = _sensor_center(calib)
    return CameraIntrinsics(fx=focal, fy=focal, cx=float(cx), cy=float(cy))


def synthetic_rig(
    focal_px: float,
    baseline_m: float,
    size: Tuple[int, int],
    plenoptic: Optional[CameraIntrinsics] = None,
) -> StereoRig:
    """Ideal rectified rig: identical distortion-free cameras, right camera at +baseline on x."""
    w, h = size
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    intr = CameraIntrinsics(fx=focal_px, fy=focal_px, cx=cx, cy=cy)
    return StereoRig(
        left=intr,
        right=intr,
        focal_px=focal_px,
        baseline_m=baseline_m,
        rect_cx=cx,
        rect_cy=cy,
        plenoptic=plenoptic,
    )


def default_stereo_rig(
    scene: SyntheticScene,
    calib: GridCalibration,
    disparity_px: float = 32.0,
) -> StereoRig:
    """
    Rig whose left camera is the plenoptic pinhole, with the baseline chosen
    so the mean scene depth has ``disparity_px`` pixels of disparity.
    """
    plenoptic = synthetic_plenoptic_intrinsics(scene, calib)
    z0 = float(np.mean([p.depth_m for p in scene.planes]))
    return synthetic_rig(
        focal_px=plenoptic.fx,
        baseline_m=disparity_px * z0 / plenoptic.fx,
        size=(calib.sensor_width, calib.sensor_height),
        plenoptic=plenoptic,
    )


def default_grid_calibration(
    width: int = 320,
    height: int = 240,
    pitch: float = 24.0,
    lattice: str = "pointy",
) -> GridCalibration:
    """Lattice covering the sensor with the reference lens half a pitch from the corner."""
    row_step = pitch * np.sqrt(3.0) / 2.0
    return GridCalibration(
        origin=(pitch / 2.0, pitch / 2.0),
        pitch=pitch,
        rotation=0.0,
        rows=int((height - pitch / 2.0) // row_step) + 1,
        cols=int(width // pitch) + 1,
        sensor_width=width,
        sensor_height=height,
        lattice=lattice,
    )


def default_scene(
    depths: Sequence[float] = (0.8, 1.6),
    seed: int = 0,
    rig: Optional[StereoRig] = None,
) -> SyntheticScene:
    """
    Textured planes split along x = 0: the nearest covers the left half,
    every further plane covers the whole view behind it.
    """
    planes = []
    for i, depth in enumerate(sorted(depths)):
        extent = (-1e9, 0.0, -1e9, 1e9) if i == 0 and len(depths) > 1 else (-1e9, 1e9, -1e9, 1e9)
        planes.append(TexturedPlane(depth_m=depth, texture_seed=seed + i, extent=extent))
    return SyntheticScene(planes=planes, rig=rig)


def write_synthetic_scene(
    out_dir: Union[str, Path],
    scene: SyntheticScene,
    calib: GridCalibration,
    config: Optional[PipelineConfig] = None,
    m_star: float = 1.0,
    b_star: float = 0.0,
) -> Dict[str, Path]:
    """
    Write every input of a pipeline run for a synthetic scene.

    The directory is also a valid LFS capture (plenoptic.pgm,
    virtual_depth.pfm, natural.ppm, stereo_depth.pfm).

    Returns:
        Mapping of asset name to written path
    """
    cfg = config or PipelineConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = build_grid(calib)
    plenoptic = synthetic_plenoptic_intrinsics(scene, calib)
    rig = scene.rig or default_stereo_rig(scene, calib)
    if rig.plenoptic is None:
        rig = rig.model_copy(update={"plenoptic": plenoptic})

    paths = {
        "raw_plenoptic": out / "plenoptic.pgm",
        "grid_calibration": out / "grid.cfg",
        "gt_sparse": out / "gt_sparse.csv",
        "relative_disparity": out / "relative_disparity.pfm",
        "gt_depth": out / "stereo_depth.pfm",
        "natural": out / "natural.ppm",
        "virtual_depth": out / "virtual_depth.pfm",
        "stereo_left": out / "left.pgm",
        "stereo_right": out / "right.pgm",
        "left_depth": out / "left_depth.pfm",
        "rig_calibration": out / "rig.cfg",
        "config": out / "run.cfg",
    }

    raw, sparse = render_plenoptic(scene, grid, cfg.bayer_pattern)
    write_raw_bayer(paths["raw_plenoptic"], raw)
    save_grid_calibration(calib, paths["grid_calibration"])
    write_sparse_csv(paths["gt_sparse"], sparse)
    write_disparity_pfm(paths["relative_disparity"], render_relative_disparity(scene, m_star, b_star, rig, calib))

    natural, depth = render_central_view(scene, calib)
    write_ppm(paths["natural"], natural)
    write_depth_pfm(paths["gt_depth"], depth)
    virtual = np.full(depth.values.shape, np.inf)
    virtual[depth.valid] = metric_to_virtual(depth.values[depth.valid], cfg)
    write_pfm(paths["virtual_depth"], virtual)

    left, right, left_depth = render_stereo(scene, rig, pattern=cfg.bayer_pattern)
    write_raw_bayer(paths["stereo_left"], left)
    write_raw_bayer(paths["stereo_right"], right)
    write_depth_pfm(paths["left_depth"], left_depth)
    save_rig_calibration(paths["rig_calibration"], rig)

    inputs = (
        "raw_plenoptic", "grid_calibration", "gt_sparse", "relative_disparity",
        "gt_depth", "stereo_left", "stereo_right", "rig_calibration",
    )
    update = {name: str(paths[name]) for name in inputs}
    update["output_dir"] = str(out / "run")
    run_config = cfg.model_copy(update=update)
    save_config(paths["config"], run_config)
    logger.info(f"Wrote synthetic scene with {len(scene.planes)} planes to {out}")
    return paths
