import logging
from typing import Optional, Union

import numpy as np

from app.core.errors import DataError, FormatError, PipelineError
from app.models.camera import CameraIntrinsics, StereoRig
from app.models.grid import MicrolensGrid
from app.models.image import DepthMap, DisparityMap, RawBayerImage, RgbImage
from app.models.pipeline import PipelineConfig
from app.models.stack import SparseDepthMap
from app.services.plenoptic import debayer
from app.services.stereo.rectification import rectify, rectify_images
from app.services.stereo.reprojection import reproject, sample_at_centroids, triangulate
from app.services.stereo.sgm import regularize, sgm

logger = logging.getLogger(__name__)

StereoInput = Union[RawBayerImage, RgbImage]


class StereoGroundTruth:
    """Intermediate and final products of the stereo ground-truth chain"""

    def __init__(
        self,
        rectified_left: np.ndarray,
        rectified_right: np.ndarray,
        disparity: DisparityMap,
        depth: DepthMap,
        plenoptic_image: RgbImage,
        plenoptic_depth: DepthMap,
        sparse: SparseDepthMap,
        rig: StereoRig,
    ):
        self.rectified_left = rectified_left
        self.rectified_right = rectified_right
        self.disparity = disparity
        self.depth = depth
        self.plenoptic_image = plenoptic_image
        self.plenoptic_depth = plenoptic_depth
        self.sparse = sparse
        self.rig = rig


class StereoProcessor:
    """Debayer, rectify, match, triangulate and reproject a stereo pair onto the plenoptic sensor"""

    def __init__(self, config: Optional[PipelineConfig] = None):
        self.config = config or PipelineConfig()

    @staticmethod
    def _rgb(image: StereoInput) -> RgbImage:
        return debayer(image) if isinstance(image, RawBayerImage) else image

    def disparity(self, left_gray: np.ndarray, right_gray: np.ndarray) -> DisparityMap:
        cfg = self.config
        disp, _ = sgm(
            left_gray,
            right_gray,
            d_min=cfg.sgm_d_min,
            d_max=cfg.sgm_d_max,
            p1=cfg.sgm_p1,
            p2=cfg.sgm_p2,
            window=cfg.sgm_census_window,
            uniqueness=cfg.sgm_uniqueness,
            lr_threshold=cfg.sgm_lr_threshold,
            subpixel=cfg.sgm_subpixel,
        )
        return regularize(
            disp,
            image=left_gray,
            speckle_size=cfg.speckle_size,
            max_diff=cfg.speckle_max_diff,
            gradient_threshold=cfg.gradient_threshold,
        )

    def ground_truth(
        self,
        left: StereoInput,
        right: StereoInput,
        rig: StereoRig,
        grid: MicrolensGrid,
        plenoptic: Optional[CameraIntrinsics] = None,
    ) -> StereoGroundTruth:
        """
        Run the full stereo ground-truth chain.

        Args:
            left: Left capture (raw Bayer or RGB)
            right: Right capture
            rig: Calibrated rig including the plenoptic pose
            grid: Microlens grid of the plenoptic sensor
            plenoptic: Pinhole model of the plenoptic sensor; defaults to ``rig.plenoptic``

        Returns:
            StereoGroundTruth with the sparse depth sampled at the microlens centroids
        """
        try:
            target = plenoptic or rig.plenoptic
            if target is None:
                raise FormatError("rig calibration has no plenoptic intrinsics")
            left_rgb, right_rgb = self._rgb(left), self._rgb(right)
            rect = rectify(rig, size=(left_rgb.width, left_rgb.height))
            (left_img, left_ok), (right_img, right_ok) = rectify_images(left_rgb.data, right_rgb.data, rect)
            left_gray, right_gray = left_img.mean(axis=0), right_img.mean(axis=0)

            disp = self.disparity(left_gray, right_gray)
            disp = DisparityMap(values=disp.values, valid=disp.valid & left_ok, frame=disp.frame)
            depth, cloud = triangulate(disp, rect.rig, colors=left_img, d_min=self.config.disparity_min)

            # rectified-left frame -> left camera -> plenoptic camera
            rect_to_left = np.eye(4)
            rect_to_left[:3, :3] = rect.left_rotation.T
            pose = rig.plenoptic_from_left @ rect_to_left
            size = (grid.calibration.sensor_width, grid.calibration.sensor_height)
            image, plen_depth = reproject(cloud, pose, target, size, distort=self.config.reproject_distort)
            sparse = sample_at_centroids(plen_depth, grid)
        except PipelineError:
            raise
        except ValueError as e:
            logger.error(f"Error computing stereo ground truth: {str(e)}")
            raise DataError(f"stereo ground truth failed: {str(e)}") from e

        logger.info(f"Stereo ground truth: {len(sparse)} of {len(grid)} microlenses have a depth")
        return StereoGroundTruth(
            rectified_left=left_img,
            rectified_right=right_img,
            disparity=disp,
            depth=depth,
            plenoptic_image=image,
            plenoptic_depth=plen_depth,
            sparse=sparse,
            rig=rect.rig,
        )
