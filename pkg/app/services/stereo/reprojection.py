import logging
from typing import Optional, Tuple

import numpy as np

from app.models.camera import CameraIntrinsics, PointCloud, StereoRig
from app.models.grid import MicrolensGrid
from app.models.image import DepthMap, DisparityMap, RgbImage
from app.models.stack import SparseDepthMap
from app.services.alignment import disparity_to_depth
from app.services.stereo.rectification import distort_points

logger = logging.getLogger(__name__)


def triangulate(
    disp: DisparityMap,
    rig: StereoRig,
    colors: Optional[np.ndarray] = None,
    d_min: float = 1e-6,
) -> Tuple[DepthMap, PointCloud]:
    """
    Depth and coloured point cloud of a rectified left disparity map.

    Args:
        disp: Left disparity in pixels (non-positive values are dropped)
        rig: Rectified rig
        colors: (3, H, W) rectified left image in [0, 1]; grey when None
        d_min: Disparities at or below this are invalid

    Returns:
        Depth z = f * B / d and the points z * K^-1 (u, v, 1) of the valid
        pixels in the rectified left frame
    """
    metric = DisparityMap(values=disp.values, valid=disp.valid, frame="metric")
    depth = disparity_to_depth(metric, rig, d_min=d_min)
    v, u = np.nonzero(depth.valid)
    z = depth.values[v, u]
    k = rig.rectified_intrinsics
    points = np.stack([(u - k.cx) / k.fx * z, (v - k.cy) / k.fy * z, z], axis=1)
    if colors is None:
        rgb = np.full((len(z), 3), 0.5)
    else:
        rgb = np.asarray(colors, dtype=np.float64)[:, v, u].T
    return depth, PointCloud(points=points, colors=rgb)


def project(
    points: np.ndarray,
    intr: CameraIntrinsics,
    distort: bool = False,
) -> Tuple[np.ndarray, np.ndarray]:
    """Pixel positions (u, v) of camera-frame points; distortion applied when asked."""
    x = points[:, 0] / points[:, 2]
    y = points[:, 1] / points[:, 2]
    if distort:
        x, y = distort_points(x, y, intr)
    return x * intr.fx + intr.cx, y * intr.fy + intr.cy


def reproject(
    cloud: PointCloud,
    target_pose: np.ndarray,
    intr: CameraIntrinsics,
    size: Tuple[int, int],
    distort: bool = False,
) -> Tuple[RgbImage, DepthMap]:
    """
    Z-buffered splatting of a point cloud into another camera.

    Args:
        cloud: Points in the source frame
        target_pose: 4x4 transform from the source frame to the target camera
        intr: Target intrinsics
        size: (width, height) of the target image
        distort: Apply the target's lens distortion to the projections

    Returns:
        Colour image and depth map of the target camera; each pixel keeps
        the nearest point that lands on it, unhit pixels are invalid
    """
    w, h = size
    pose = np.asarray(target_pose, dtype=np.float64)
    pts = cloud.points @ pose[:3, :3].T + pose[:3, 3]
    front = pts[:, 2] > 0
    pts, cols = pts[front], cloud.colors[front]
    u, v = project(pts, intr, distort)
    px = np.floor(u + 0.5).astype(np.int64)
    py = np.floor(v + 0.5).astype(np.int64)
    inside = (px >= 0) & (px < w) & (py >= 0) & (py < h)
    px, py, z, cols = px[inside], py[inside], pts[inside, 2], cols[inside]

    flat = py * w + px
    order = np.lexsort((z, flat))
    first = np.unique(flat[order], return_index=True)[1]
    winners = order[first]

    depth = np.zeros(h * w)
    valid = np.zeros(h * w, dtype=bool)
    image = np.zeros((3, h * w))
    depth[flat[winners]] = z[winners]
    valid[flat[winners]] = True
    image[:, flat[winners]] = np.clip(cols[winners].T, 0.0, 1.0)
    logger.info(f"Reprojected {len(winners)} pixels from {len(cloud)} points")
    return RgbImage(data=image.reshape(3, h, w)), DepthMap(values=depth.reshape(h, w), valid=valid.reshape(h, w))


def sample_at_centroids(depth: DepthMap, grid: MicrolensGrid) -> SparseDepthMap:
    """Nearest-pixel depth at every microlens centroid; invalid pixels give no entry."""
    px = np.floor(grid.centroids + 0.5).astype(np.int64)
    inside = (px[:, 0] >= 0) & (px[:, 1] >= 0) & (px[:, 0] < depth.width) & (px[:, 1] < depth.height)
    keep = np.zeros(len(grid), dtype=bool)
    keep[inside] = depth.valid[px[inside, 1], px[inside, 0]]
    if not np.any(keep):
        return SparseDepthMap.empty("stereo-gt")
    return SparseDepthMap(
        coords=grid.axial[keep],
        centroids=grid.centroids[keep],
        depths=depth.values[px[keep, 1], px[keep, 0]],
        source="stereo-gt",
    )
