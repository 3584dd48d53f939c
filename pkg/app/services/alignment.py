import logging
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from app.core.errors import (
    DegenerateX,
    FormatError,
    NoConsensus,
    NonPositiveDepth,
    NumericError,
    TooFewCorrespondences,
    UsageError,
)
from app.models.alignment import CorrespondenceSet, LinearScaleModel
from app.models.camera import StereoRig
from app.models.image import DepthMap, DisparityMap
from app.models.pipeline import PipelineConfig
from app.models.stack import SparseDepthMap
from app.services.image_io import read_key_values, write_key_values

logger = logging.getLogger(__name__)

# Either a rectified rig or its focal length times baseline (px * m)
RigLike = Union[StereoRig, float]

MAD_TO_SIGMA = 1.4826


def focal_baseline(rig: RigLike) -> float:
    return rig.focal_baseline if isinstance(rig, StereoRig) else float(rig)


def depth_to_disparity(depth: Union[DepthMap, np.ndarray], rig: RigLike) -> Union[DisparityMap, np.ndarray]:
    """
    Metric disparity d = f * B / z.

    Args:
        depth: DepthMap (invalid pixels stay invalid) or a raw array of depths
        rig: Rectified rig or f * B

    Returns:
        DisparityMap in the metric frame, or an array for array input
    """
    fb = focal_baseline(rig)
    if isinstance(depth, DepthMap):
        values = np.where(depth.valid, fb / np.where(depth.valid, depth.values, 1.0), 0.0)
        return DisparityMap(values=values, valid=depth.valid.copy(), frame="metric")
    z = np.asarray(depth, dtype=np.float64)
    if np.any(~(z > 0)):
        raise NonPositiveDepth("depth must be positive and finite to convert to disparity")
    return fb / z


def disparity_to_depth(disp: DisparityMap, rig: RigLike, d_min: float = 1e-6) -> DepthMap:
    """Depth z = f * B / d; pixels with d <= d_min become invalid."""
    fb = focal_baseline(rig)
    valid = disp.valid & (disp.values > d_min)
    values = np.where(valid, fb / np.where(valid, disp.values, 1.0), 0.0)
    return DepthMap(values=values, valid=valid)


def sample_correspondences(dense: DisparityMap, sparse: SparseDepthMap, rig: RigLike) -> CorrespondenceSet:
    """
    Pair each sparse depth with the dense relative disparity at its centroid.

    Args:
        dense: Dense relative disparity in the central-view frame
        sparse: Sparse metric depths anchored at microlens centroids
        rig: Rectified rig or f * B used to turn depths into disparities

    Returns:
        CorrespondenceSet of (relative, metric) disparities; centroids that
        fall outside the map or on invalid dense pixels are skipped
    """
    px = np.floor(sparse.centroids + 0.5).astype(np.int64)
    inside = (px[:, 0] >= 0) & (px[:, 1] >= 0) & (px[:, 0] < dense.width) & (px[:, 1] < dense.height)
    keep = np.zeros(len(sparse), dtype=bool)
    keep[inside] = dense.valid[px[inside, 1], px[inside, 0]]
    if keep.sum() < 2:
        raise TooFewCorrespondences(f"only {int(keep.sum())} sparse samples hit valid dense pixels")
    x = dense.values[px[keep, 1], px[keep, 0]]
    y = depth_to_disparity(sparse.depths[keep], rig)
    logger.info(f"Sampled {int(keep.sum())} valid correspondences out of {len(sparse)} sparse points")
    return CorrespondenceSet(x=x, y=y, pixels=sparse.centroids[keep])


def _check_fit_input(pairs: CorrespondenceSet) -> None:
    if len(pairs) < 2:
        raise TooFewCorrespondences(f"need at least 2 correspondences, got {len(pairs)}")
    if np.ptp(pairs.x) == 0:
        raise DegenerateX("all relative disparities are equal; the slope is undefined")


def _residual_stats(pairs: CorrespondenceSet, m: float, b: float) -> Tuple[int, float]:
    """Inliers within three robust sigmas of the model, and the median absolute residual."""
    res = np.abs(pairs.y - (m * pairs.x + b))
    median = float(np.median(res))
    threshold = 3.0 * MAD_TO_SIGMA * median + 1e-9 * (1.0 + float(np.max(np.abs(pairs.y))))
    return int(np.count_nonzero(res <= threshold)), median


def _least_squares(x: np.ndarray, y: np.ndarray, w: Optional[np.ndarray] = None) -> Tuple[float, float]:
    A = np.vstack([x, np.ones(len(x))]).T
    if w is not None:
        sw = np.sqrt(w)
        A, y = A * sw[:, None], y * sw
    (m, b), *_ = np.linalg.lstsq(A, y, rcond=None)
    return float(m), float(b)


def fit_theil_sen(
    pairs: CorrespondenceSet,
    mode: str = "exact",
    samples: int = 1_000_000,
    seed: int = 0,
) -> LinearScaleModel:
    """
    Theil-Sen line: median of pairwise slopes, then median intercept.

    Args:
        pairs: Correspondences (x relative, y metric disparity)
        mode: "exact" uses every pair with x_i != x_j, "sampled" draws
            ``samples`` seeded random pairs
        samples: Pair count in sampled mode
        seed: Seed of the pair sampler

    Returns:
        LinearScaleModel tagged "theil-sen"
    """
    _check_fit_input(pairs)
    x, y = pairs.x, pairs.y
    if mode == "exact":
        i, j = np.triu_indices(len(x), k=1)
    else:
        rng = np.random.default_rng(seed)
        i = rng.integers(0, len(x), samples)
        j = rng.integers(0, len(x), samples)
    dx = x[j] - x[i]
    distinct = dx != 0
    if not np.any(distinct):
        raise DegenerateX("no sampled pair has distinct relative disparities")
    slopes = (y[j] - y[i])[distinct] / dx[distinct]
    m = float(np.median(slopes))
    b = float(np.median(y - m * x))
    inliers, residual_median = _residual_stats(pairs, m, b)
    return LinearScaleModel(
        m=m, b=b, estimator="theil-sen", inlier_count=inliers, residual_median=residual_median
    )


def fit_ransac(
    pairs: CorrespondenceSet,
    iterations: int = 1000,
    inlier_threshold: float = 0.5,
    seed: int = 0,
) -> LinearScaleModel:
    """
    RANSAC over seeded two-point hypotheses with a least-squares refit on the best consensus set.

    Raises:
        DegenerateX: All x are equal
        NoConsensus: No hypothesis gathers two inliers
    """
    _check_fit_input(pairs)
    x, y = pairs.x, pairs.y
    rng = np.random.default_rng(seed)
    best: Optional[np.ndarray] = None
    best_count = 0
    for _ in range(iterations):
        i, j = rng.choice(len(x), size=2, replace=False)
        if x[i] == x[j]:
            continue
        m = (y[j] - y[i]) / (x[j] - x[i])
        b = y[i] - m * x[i]
        inliers = np.abs(y - (m * x + b)) <= inlier_threshold
        count = int(inliers.sum())
        if count > best_count:
            best, best_count = inliers, count
    if best is None or best_count < 2:
        raise NoConsensus(f"best RANSAC hypothesis has {best_count} inliers")
    if np.ptp(x[best]) == 0:
        raise DegenerateX("consensus set has a single relative disparity")
    m, b = _least_squares(x[best], y[best])
    _, residual_median = _residual_stats(pairs, m, b)
    return LinearScaleModel(
        m=m, b=b, estimator="ransac", inlier_count=best_count, residual_median=residual_median
    )


def fit_huber(
    pairs: CorrespondenceSet,
    delta: Optional[float] = None,
    c: float = 1.345,
    max_iters: int = 100,
    tol: float = 1e-10,
) -> LinearScaleModel:
    """
    Huber regression by iteratively reweighted least squares.

    Args:
        pairs: Correspondences
        delta: Absolute Huber threshold; when None it is ``c`` times the
            MAD-based robust scale of the current residuals
        c: Tuning constant for the relative threshold
        max_iters: Iteration cap; hitting it returns the last iterate with
            ``converged=False``
        tol: Convergence threshold on the parameter change

    Returns:
        LinearScaleModel tagged "huber"
    """
    _check_fit_input(pairs)
    x, y = pairs.x, pairs.y
    m, b = _least_squares(x, y)
    converged = False
    for _ in range(max_iters):
        res = y - (m * x + b)
        if delta is None:
            scale = MAD_TO_SIGMA * float(np.median(np.abs(res - np.median(res))))
            if scale == 0:
                converged = True
                break
            threshold = c * scale
        else:
            threshold = delta
        abs_res = np.abs(res)
        w = np.where(abs_res <= threshold, 1.0, threshold / np.maximum(abs_res, 1e-300))
        m_new, b_new = _least_squares(x, y, w)
        step = max(abs(m_new - m), abs(b_new - b))
        m, b = m_new, b_new
        if step < tol:
            converged = True
            break
    if not converged:
        logger.warning(f"Huber regression did not converge within {max_iters} iterations")
    inliers, residual_median = _residual_stats(pairs, m, b)
    return LinearScaleModel(
        m=m,
        b=b,
        estimator="huber",
        inlier_count=inliers,
        residual_median=residual_median,
        converged=converged,
    )


def fit_sgd_huber(
    pairs: CorrespondenceSet,
    lr: float = 0.01,
    epochs: int = 200,
    seed: int = 0,
    delta: float = 1.345,
) -> LinearScaleModel:
    """
    Per-sample SGD on the Huber loss with standardized x.

    The parameters start at zero, so ``lr=0`` returns m = b = 0.
    """
    _check_fit_input(pairs)
    x, y = pairs.x, pairs.y
    mu, sd = float(np.mean(x)), float(np.std(x))
    xs = (x - mu) / sd
    rng = np.random.default_rng(seed)
    a, c = 0.0, 0.0
    for _ in range(epochs):
        for i in rng.permutation(len(xs)):
            r = a * xs[i] + c - y[i]
            g = r if abs(r) <= delta else delta * np.sign(r)
            a -= lr * g * xs[i]
            c -= lr * g
    m = a / sd
    b = c - a * mu / sd
    if not (np.isfinite(m) and np.isfinite(b)):
        raise NumericError("SGD-Huber diverged; lower the learning rate")
    inliers, residual_median = _residual_stats(pairs, m, b)
    return LinearScaleModel(
        m=float(m), b=float(b), estimator="sgd-huber", inlier_count=inliers, residual_median=residual_median
    )


def fuse(dense_rel: DisparityMap, model: LinearScaleModel, rig: RigLike, d_min: float = 1e-6) -> DepthMap:
    """Apply y = m x + b to the relative map and convert to metric depth."""
    if not (np.isfinite(model.m) and np.isfinite(model.b)):
        raise NumericError("scale model is not finite")
    if model.m <= 0:
        logger.warning(f"Non-positive slope m={model.m}; fused depth ordering is inverted")
    aligned = DisparityMap(values=model.predict(dense_rel.values), valid=dense_rel.valid, frame="metric")
    return disparity_to_depth(aligned, rig, d_min=d_min)


def write_model_report(path: Union[str, Path], model: LinearScaleModel) -> None:
    write_key_values(path, model.model_dump())


def read_model_report(path: Union[str, Path]) -> LinearScaleModel:
    values = read_key_values(path)
    try:
        values["converged"] = values.get("converged", "True") == "True"
        return LinearScaleModel(**values)
    except ValueError as e:
        raise FormatError(f"invalid model report {path}: {str(e)}") from e


class ScaleAligner:
    """Fits the relative-to-metric disparity model with the configured estimator"""

    def __init__(self, config: Optional[PipelineConfig] = None):
        self.config = config or PipelineConfig()

    def fit(self, pairs: CorrespondenceSet, estimator: Optional[str] = None) -> LinearScaleModel:
        """
        Fit a linear scale model.

        Args:
            pairs: Correspondences
            estimator: Overrides the configured estimator

        Returns:
            The fitted LinearScaleModel
        """
        cfg = self.config
        estimator = estimator or cfg.estimator
        if estimator == "theil-sen":
            mode = cfg.theil_sen_mode
            if mode == "auto":
                mode = "exact" if len(pairs) <= cfg.theil_sen_exact_limit else "sampled"
            model = fit_theil_sen(pairs, mode=mode, samples=cfg.theil_sen_samples, seed=cfg.seed)
        elif estimator == "ransac":
            model = fit_ransac(pairs, cfg.ransac_iterations, cfg.ransac_threshold, seed=cfg.seed)
        elif estimator == "huber":
            model = fit_huber(pairs, c=cfg.huber_c, max_iters=cfg.huber_max_iters, tol=cfg.huber_tol)
        elif estimator == "sgd-huber":
            model = fit_sgd_huber(
                pairs, lr=cfg.sgd_learning_rate, epochs=cfg.sgd_epochs, seed=cfg.seed, delta=cfg.sgd_delta
            )
        else:
            raise UsageError(f"unknown estimator {estimator}")
        logger.info(
            f"Fitted {estimator} model: m={model.m:.6g}, b={model.b:.6g}, "
            f"{model.inlier_count}/{len(pairs)} inliers"
        )
        if model.m <= 0:
            logger.warning(f"Fitted slope m={model.m} is not positive")
        return model

    def align(self, dense_rel: DisparityMap, sparse: SparseDepthMap, rig: RigLike) -> Tuple[LinearScaleModel, DepthMap]:
        """Sample correspondences, fit the model and fuse the dense map."""
        pairs = sample_correspondences(dense_rel, sparse, rig)
        model = self.fit(pairs)
        return model, fuse(dense_rel, model, rig, d_min=self.config.disparity_min)
