from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class CameraIntrinsics(BaseModel):
    """Pinhole intrinsics with Brown radial-tangential distortion"""
    model_config = ConfigDict(frozen=True)

    fx: float = Field(..., gt=0, description="Focal length along x in pixels")
    fy: float = Field(..., gt=0, description="Focal length along y in pixels")
    cx: float = Field(..., description="Principal point x in pixels")
    cy: float = Field(..., description="Principal point y in pixels")
    k1: float = 0.0
    k2: float = 0.0
    p1: float = 0.0
    p2: float = 0.0

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def has_distortion(self) -> bool:
        return any(c != 0.0 for c in (self.k1, self.k2, self.p1, self.p2))

    def without_distortion(self) -> "CameraIntrinsics":
        return CameraIntrinsics(fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy)


def _as_matrix(v, shape: Tuple[int, ...]) -> np.ndarray:
    m = np.asarray(v, dtype=np.float64)
    if m.size != int(np.prod(shape)):
        raise ValueError(f"expected {int(np.prod(shape))} values for a {shape} matrix")
    return m.reshape(shape)


class StereoRig(BaseModel):
    """Calibrated stereo pair plus its rectified geometry and the plenoptic pose.

    ``rotation``/``translation`` map left-camera coordinates into the right
    camera (X_r = R X_l + t). ``plenoptic_from_left`` is a 4x4 rigid transform
    taking left-camera coordinates into the plenoptic camera frame.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    left: CameraIntrinsics
    right: CameraIntrinsics
    rotation: np.ndarray = Field(default_factory=lambda: np.eye(3))
    translation: Optional[np.ndarray] = Field(None, description="Defaults to a pure-x baseline of baseline_m")
    focal_px: float = Field(..., gt=0, description="Rectified focal length f in pixels")
    baseline_m: float = Field(..., gt=0, description="Rectified baseline B in meters")
    rect_cx: float = Field(..., description="Rectified principal point x")
    rect_cy: float = Field(..., description="Rectified principal point y")
    plenoptic_from_left: np.ndarray = Field(default_factory=lambda: np.eye(4))
    plenoptic: Optional[CameraIntrinsics] = Field(None, description="Pinhole model of the plenoptic sensor for reprojection")

    @field_validator("rotation", mode="before")
    @classmethod
    def _check_rotation(cls, v) -> np.ndarray:
        r = _as_matrix(v, (3, 3))
        if np.linalg.norm(r.T @ r - np.eye(3)) >= 1e-9:
            raise ValueError("rig rotation is not orthonormal")
        return r

    @field_validator("translation", mode="before")
    @classmethod
    def _check_translation(cls, v) -> Optional[np.ndarray]:
        return None if v is None else _as_matrix(v, (3,))

    @model_validator(mode="after")
    def _default_translation(self) -> "StereoRig":
        if self.translation is None:
            self.translation = np.array([-self.baseline_m, 0.0, 0.0])
        return self

    @field_validator("plenoptic_from_left", mode="before")
    @classmethod
    def _check_pose(cls, v) -> np.ndarray:
        t = _as_matrix(v, (4, 4))
        r = t[:3, :3]
        if np.linalg.norm(r.T @ r - np.eye(3)) >= 1e-9:
            raise ValueError("plenoptic pose rotation is not orthonormal")
        return t

    @property
    def rectified_matrix(self) -> np.ndarray:
        return np.array([[self.focal_px, 0.0, self.rect_cx], [0.0, self.focal_px, self.rect_cy], [0.0, 0.0, 1.0]])

    @property
    def rectified_intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(fx=self.focal_px, fy=self.focal_px, cx=self.rect_cx, cy=self.rect_cy)

    @property
    def focal_baseline(self) -> float:
        return self.focal_px * self.baseline_m


class RectificationResult(BaseModel):
    """Rectifying homographies and rotations for both cameras"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    left_homography: np.ndarray
    right_homography: np.ndarray
    left_rotation: np.ndarray = Field(..., description="Rotation from left camera to rectified frame")
    right_rotation: np.ndarray = Field(..., description="Rotation from right camera to rectified frame")
    rig: StereoRig = Field(..., description="Rig with rectified focal, baseline and principal point filled in")


class PointCloud(BaseModel):
    """Coloured 3D points in a camera frame"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    points: np.ndarray = Field(..., description="(M, 3) coordinates in meters")
    colors: np.ndarray = Field(..., description="(M, 3) RGB in [0, 1]")

    @model_validator(mode="after")
    def _check(self) -> "PointCloud":
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(self.points) != len(self.colors):
            raise ValueError("points and colors must have equal length")
        return self

    def __len__(self) -> int:
        return int(len(self.points))


class CostVolume(BaseModel):
    """Per-(pixel, disparity) matching cost"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    costs: np.ndarray = Field(..., description="(H, W, D) non-negative costs")
    d_min: int
    d_max: int

    @property
    def disparities(self) -> np.ndarray:
        return np.arange(self.d_min, self.d_max + 1)
