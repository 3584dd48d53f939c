"""Lens distortion, stereo rectification and image remapping on OpenCV.

Distortion is OpenCV's four-coefficient model (k1, k2, p1, p2), the Brown
radial-tangential model on normalized coordinates (x, y) = K^-1 (u, v, 1).
"""
import logging
from pathlib import Path
from typing import Optional, Tuple, Union

import cv2
import numpy as np

from app.core.errors import DegenerateGeometry, FormatError
from app.models.camera import CameraIntrinsics, RectificationResult, StereoRig
from app.services.image_io import read_key_values, write_key_values

logger = logging.getLogger(__name__)

UNDISTORT_CRITERIA = (cv2.TERM_CRITERIA_COUNT | cv2.TERM_CRITERIA_EPS, 50, 1e-15)
# sample positions this close outside the border still count as inside
EDGE_TOLERANCE = 1e-6


def _coefficients(intr: CameraIntrinsics) -> np.ndarray:
    return np.array([intr.k1, intr.k2, intr.p1, intr.p2])


def _project_normalized(
    x: np.ndarray, y: np.ndarray, intr: CameraIntrinsics, matrix: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size == 0:
        return x.copy(), y.copy()
    points = np.stack([x.ravel(), y.ravel(), np.ones(x.size)], axis=1)
    image, _ = cv2.projectPoints(points, np.zeros(3), np.zeros(3), matrix, _coefficients(intr))
    image = image.reshape(-1, 2)
    return image[:, 0].reshape(x.shape), image[:, 1].reshape(x.shape)


def _undistort(
    u: np.ndarray, v: np.ndarray, intr: CameraIntrinsics, matrix: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.size == 0:
        return u.copy(), v.copy()
    points = np.stack([u.ravel(), v.ravel()], axis=1).reshape(-1, 1, 2)
    out = cv2.undistortPoints(points, matrix, _coefficients(intr), R=None, P=matrix, criteria=UNDISTORT_CRITERIA)
    out = out.reshape(-1, 2)
    return out[:, 0].reshape(u.shape), out[:, 1].reshape(u.shape)


def distort_points(x: np.ndarray, y: np.ndarray, intr: CameraIntrinsics) -> Tuple[np.ndarray, np.ndarray]:
    """Apply the forward distortion model to normalized coordinates."""
    return _project_normalized(x, y, intr, np.eye(3))


def undistort_points(xd: np.ndarray, yd: np.ndarray, intr: CameraIntrinsics) -> Tuple[np.ndarray, np.ndarray]:
    """Invert ``distort_points`` with OpenCV's iterative undistortion."""
    if not intr.has_distortion:
        return np.asarray(xd, dtype=np.float64).copy(), np.asarray(yd, dtype=np.float64).copy()
    return _undistort(xd, yd, intr, np.eye(3))


def distort_pixels(u: np.ndarray, v: np.ndarray, intr: CameraIntrinsics) -> Tuple[np.ndarray, np.ndarray]:
    """Ideal pinhole pixel positions to distorted ones."""
    if not intr.has_distortion:
        return np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
    x = (np.asarray(u, dtype=np.float64) - intr.cx) / intr.fx
    y = (np.asarray(v, dtype=np.float64) - intr.cy) / intr.fy
    return _project_normalized(x, y, intr, intr.matrix)


def undistort_pixels(u: np.ndarray, v: np.ndarray, intr: CameraIntrinsics) -> Tuple[np.ndarray, np.ndarray]:
    if not intr.has_distortion:
        return np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
    return _undistort(u, v, intr, intr.matrix)


def remap(image: np.ndarray, map_u: np.ndarray, map_v: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Bilinear sampling of ``image`` at (map_u, map_v).

    Args:
        image: (H, W) or (C, H, W) source
        map_u: Source x for every output pixel
        map_v: Source y for every output pixel

    Returns:
        Sampled image and a mask that is False where the source position
        falls outside the source image
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[-2:]
    tol = EDGE_TOLERANCE
    valid = (map_u >= -tol) & (map_u <= w - 1 + tol) & (map_v >= -tol) & (map_v <= h - 1 + tol)
    map_u = np.asarray(map_u, dtype=np.float32)
    map_v = np.asarray(map_v, dtype=np.float32)
    planes = image[None] if image.ndim == 2 else image
    out = np.stack([
        cv2.remap(np.ascontiguousarray(p), map_u, map_v, cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)
        for p in planes
    ])
    out = np.where(valid, out, 0.0)
    return (out[0] if image.ndim == 2 else out), valid


def undistort(image: np.ndarray, intr: CameraIntrinsics) -> Tuple[np.ndarray, np.ndarray]:
    """Resample a distorted image onto the ideal pinhole grid of ``intr``."""
    h, w = np.asarray(image).shape[-2:]
    map_u, map_v = rectification_maps(intr, np.eye(3), intr.without_distortion(), (w, h))
    return remap(image, map_u, map_v)


def rectify(rig: StereoRig, size: Optional[Tuple[int, int]] = None) -> RectificationResult:
    """
    Rotate both cameras so the baseline is the rectified x axis.

    ``cv2.stereoRectify`` with zero disparity at infinity; both cameras share
    one rectified intrinsic matrix.

    Args:
        rig: Calibrated rig (X_r = R X_l + t)
        size: (width, height) of the stereo images; defaults to twice the
            left principal point plus one

    Returns:
        Homographies H = K_new R_i K_i^-1 and the rig with rectified focal,
        baseline and principal point
    """
    r, t = rig.rotation, rig.translation
    baseline = float(np.linalg.norm(t))
    if baseline < 1e-12:
        raise DegenerateGeometry("stereo baseline is zero")
    left, right = rig.left, rig.right
    if size is None:
        size = (int(round(2 * left.cx + 1)), int(round(2 * left.cy + 1)))
    try:
        r_left, r_right, p_left, p_right, _, _, _ = cv2.stereoRectify(
            left.matrix,
            _coefficients(left),
            right.matrix,
            _coefficients(right),
            tuple(int(s) for s in size),
            r,
            np.asarray(t, dtype=np.float64).reshape(3, 1),
            flags=cv2.CALIB_ZERO_DISPARITY,
            alpha=-1,
        )
    except cv2.error as e:
        raise DegenerateGeometry(f"stereo rectification failed: {str(e)}") from e
    if not np.all(np.isfinite(p_right)) or abs(p_right[1, 3]) > 1e-9 * abs(p_right[0, 3]):
        raise DegenerateGeometry("only horizontal stereo rigs can be rectified")

    k_new = p_left[:, :3]
    focal = float(k_new[0, 0])
    cx, cy = float(k_new[0, 2]), float(k_new[1, 2])
    h_left = k_new @ r_left @ np.linalg.inv(left.matrix)
    h_right = k_new @ r_right @ np.linalg.inv(right.matrix)
    rectified = rig.model_copy(update={
        "focal_px": focal,
        "baseline_m": abs(float(p_right[0, 3])) / focal,
        "rect_cx": cx,
        "rect_cy": cy,
    })
    logger.info(f"Rectified rig: f={focal:.3f} px, B={rectified.baseline_m:.6f} m")
    return RectificationResult(
        left_homography=h_left,
        right_homography=h_right,
        left_rotation=r_left,
        right_rotation=r_right,
        rig=rectified,
    )


def rectification_maps(
    intr: CameraIntrinsics,
    rotation: np.ndarray,
    rectified: CameraIntrinsics,
    size: Tuple[int, int],
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Source pixel of every rectified pixel, undistortion included.

    Args:
        intr: Original (distorted) intrinsics
        rotation: Camera-to-rectified rotation
        rectified: Rectified intrinsics
        size: (width, height) of the rectified image

    Returns:
        (map_u, map_v) arrays of shape (height, width)
    """
    map_u, map_v = cv2.initUndistortRectifyMap(
        intr.matrix, _coefficients(intr), rotation, rectified.matrix, tuple(int(s) for s in size), cv2.CV_32FC1
    )
    return map_u.astype(np.float64), map_v.astype(np.float64)


def rectify_images(
    left: np.ndarray,
    right: np.ndarray,
    rect: RectificationResult,
) -> Tuple[Tuple[np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray]]:
    """Undistort and rectify a pair; returns ((left, valid), (right, valid))."""
    size = (np.asarray(left).shape[-1], np.asarray(left).shape[-2])
    target = rect.rig.rectified_intrinsics
    out = []
    for image, intr, rotation in (
        (left, rect.rig.left, rect.left_rotation),
        (right, rect.rig.right, rect.right_rotation),
    ):
        map_u, map_v = rectification_maps(intr, rotation, target, size)
        out.append(remap(image, map_u, map_v))
    return out[0], out[1]


def _intrinsics(values: dict, prefix: str) -> CameraIntrinsics:
    return CameraIntrinsics(
        fx=float(values[f"{prefix}_fx"]),
        fy=float(values[f"{prefix}_fy"]),
        cx=float(values[f"{prefix}_cx"]),
        cy=float(values[f"{prefix}_cy"]),
        k1=float(values.get(f"{prefix}_k1", 0.0)),
        k2=float(values.get(f"{prefix}_k2", 0.0)),
        p1=float(values.get(f"{prefix}_p1", 0.0)),
        p2=float(values.get(f"{prefix}_p2", 0.0)),
    )


def _floats(text: str, count: int) -> np.ndarray:
    values = np.array([float(p) for p in text.split(",")])
    if values.size != count:
        raise ValueError(f"expected {count} comma separated values, got {values.size}")
    return values


def load_rig_calibration(path: Union[str, Path]) -> StereoRig:
    """
    Read a key-value rig calibration.

    Keys: left_fx/fy/cx/cy[/k1/k2/p1/p2], the same with a right_ prefix,
    right_from_left and plenoptic_from_left as 16 comma separated values
    (4x4 row-major), optionally plenoptic_fx/fy/cx/cy. Rectified values
    (focal_px, baseline_m, rect_cx, rect_cy) are filled by ``rectify``.
    """
    values = read_key_values(path)
    try:
        left = _intrinsics(values, "left")
        right = _intrinsics(values, "right")
        right_from_left = _floats(values["right_from_left"], 16).reshape(4, 4)
        pose = values.get("plenoptic_from_left")
        plenoptic = _intrinsics(values, "plenoptic") if "plenoptic_fx" in values else None
        translation = right_from_left[:3, 3]
        return StereoRig(
            left=left,
            right=right,
            rotation=right_from_left[:3, :3],
            translation=translation,
            focal_px=left.fx,
            baseline_m=max(float(np.linalg.norm(translation)), 1e-12),
            rect_cx=left.cx,
            rect_cy=left.cy,
            plenoptic_from_left=np.eye(4) if pose is None else _floats(pose, 16).reshape(4, 4),
            plenoptic=plenoptic,
        )
    except (KeyError, ValueError) as e:
        logger.error(f"Invalid rig calibration {path}: {str(e)}")
        raise FormatError(f"invalid rig calibration file {path}: {str(e)}") from e


def save_rig_calibration(path: Union[str, Path], rig: StereoRig) -> None:
    values = {}
    cameras = [("left", rig.left), ("right", rig.right)]
    if rig.plenoptic is not None:
        cameras.append(("plenoptic", rig.plenoptic))
    for prefix, intr in cameras:
        for name, value in intr.model_dump().items():
            values[f"{prefix}_{name}"] = float(value)
    right_from_left = np.eye(4)
    right_from_left[:3, :3] = rig.rotation
    right_from_left[:3, 3] = rig.translation
    values["right_from_left"] = right_from_left
    values["plenoptic_from_left"] = rig.plenoptic_from_left
    write_key_values(path, values)
