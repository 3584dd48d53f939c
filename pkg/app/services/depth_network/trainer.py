import csv
import logging
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from app.core.errors import NoTrainingData, NumericError, ShapeMismatch
from app.models.network import ArchitectureConfig, NetworkParams, TrainConfig, TrainResult
from app.models.pipeline import PipelineConfig
from app.models.stack import FlowerStackBatch, SparseDepthMap
from app.services.depth_network.network import backward, build_network, forward, masked_mse, masked_mse_grad
from app.services.depth_network.optimizer import adam_step, init_adam

logger = logging.getLogger(__name__)


def _supervised_targets(stacks: FlowerStackBatch, gt: SparseDepthMap) -> Tuple[np.ndarray, np.ndarray]:
    """Indices of stacks with a ground-truth depth and those depths, in stack order."""
    depth_by_key = gt.depth_by_key()
    indices, depths = [], []
    for i, (q, r) in enumerate(stacks.coords):
        d = depth_by_key.get((int(q), int(r)))
        if d is not None:
            indices.append(i)
            depths.append(d)
    return np.array(indices, dtype=np.int64), np.array(depths, dtype=np.float32)


def centroid_mask(n: int, size: int, dtype=np.float32) -> np.ndarray:
    """(n, 1, size, size) mask selecting the central pixel of every output map."""
    mask = np.zeros((n, 1, size, size), dtype=dtype)
    mask[:, 0, size // 2, size // 2] = 1
    return mask


def train(
    stacks: FlowerStackBatch,
    gt: SparseDepthMap,
    config: TrainConfig,
    arch: Optional[ArchitectureConfig] = None,
    params: Optional[NetworkParams] = None,
) -> TrainResult:
    """
    Fit the depth network to sparse ground truth at the stack centroids.

    Args:
        stacks: Flower stacks; those without a ground-truth key are skipped
        gt: Sparse metric depth keyed like ``stacks``
        config: Epochs, batch size, Adam settings and seed
        arch: Architecture used when ``params`` is not given
        params: Optional initial parameters (trained further in place)

    Returns:
        TrainResult with the final params and the mean loss per epoch
    """
    indices, depths = _supervised_targets(stacks, gt)
    if indices.size == 0:
        raise NoTrainingData("no flower stack has a ground-truth depth")
    if indices.size < len(stacks):
        logger.info(f"Training on {indices.size} of {len(stacks)} stacks that have ground truth")

    size = stacks.tensor.shape[-1]
    if params is None:
        arch = arch or ArchitectureConfig(in_channels=stacks.tensor.shape[1], patch_size=size)
        params = build_network(arch, seed=config.seed)
    x_all = stacks.tensor[indices]
    target_all = np.zeros((indices.size, 1, size, size), dtype=np.float32)
    target_all[:, 0, size // 2, size // 2] = depths

    rng = np.random.default_rng(config.seed)
    state = init_adam(params)
    history: List[float] = []
    for epoch in range(config.epochs):
        order = rng.permutation(indices.size)
        losses, weights = [], []
        for start in range(0, indices.size, config.batch_size):
            batch = order[start:start + config.batch_size]
            x, target = x_all[batch], target_all[batch]
            mask = centroid_mask(len(batch), size)
            pred, caches = forward(params, x, mode="train")
            losses.append(masked_mse(pred, target, mask))
            weights.append(len(batch))
            grads = backward(params, caches, masked_mse_grad(pred, target, mask))
            params, state = adam_step(params, grads, state, config)
        mean_loss = float(np.average(losses, weights=weights))
        if not np.isfinite(mean_loss):
            logger.error(f"Training diverged at epoch {epoch + 1}")
            raise NumericError(f"training loss became non-finite at epoch {epoch + 1}")
        history.append(mean_loss)
        logger.info(f"Epoch {epoch + 1}/{config.epochs}: mean loss {mean_loss:.6g}")
    return TrainResult(params=params, loss_history=history)


def predict_sparse(
    params: NetworkParams,
    stacks: FlowerStackBatch,
    min_depth: float = 1e-3,
    batch_size: int = 128,
) -> SparseDepthMap:
    """
    One metric depth per stack: the eval-mode output at the central pixel.

    Args:
        params: Trained (or freshly initialised) network
        stacks: Flower stacks to predict
        min_depth: Outputs below this are clamped so every depth is positive
        batch_size: Stacks per forward pass

    Returns:
        SparseDepthMap tagged "predicted", keyed and anchored like ``stacks``
    """
    first = params.specs[0]
    if stacks.tensor.shape[1] != first.in_channels:
        raise ShapeMismatch(f"network expects {first.in_channels} channels, stacks have {stacks.tensor.shape[1]}")
    size = stacks.tensor.shape[-1]
    centre = size // 2
    values = []
    for start in range(0, len(stacks), batch_size):
        out, _ = forward(params, stacks.tensor[start:start + batch_size], mode="eval")
        if out.shape[1:] != (1, size, size):
            raise ShapeMismatch(f"network output {out.shape[1:]} does not match the stack size {size}")
        values.append(out[:, 0, centre, centre].astype(np.float64))
    depths = np.concatenate(values) if values else np.zeros(0)
    clamped = ~np.isfinite(depths) | (depths < min_depth)
    if np.any(clamped):
        logger.warning(f"Clamped {int(clamped.sum())} of {depths.size} predicted depths to {min_depth} m")
        depths = np.where(clamped, min_depth, depths)
    return SparseDepthMap(coords=stacks.coords, centroids=stacks.centroids, depths=depths, source="predicted")


def write_loss_history(path: Union[str, Path], history: List[float]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["epoch", "mean_loss"])
        for epoch, loss in enumerate(history, start=1):
            writer.writerow([epoch, repr(float(loss))])


class DepthNetworkTrainer:
    """Trains the depth network and predicts sparse depth from flower stacks"""

    def __init__(self, config: Optional[PipelineConfig] = None):
        self.config = config or PipelineConfig()

    def fit(self, stacks: FlowerStackBatch, gt: SparseDepthMap) -> TrainResult:
        try:
            return train(stacks, gt, self.config.train_config(), arch=self.config.architecture())
        except (NoTrainingData, NumericError, ShapeMismatch):
            raise
        except Exception as e:
            logger.error(f"Error training the depth network: {str(e)}")
            raise NumericError(f"training failed: {str(e)}") from e

    def predict(self, params: NetworkParams, stacks: FlowerStackBatch) -> SparseDepthMap:
        return predict_sparse(
            params,
            stacks,
            min_depth=self.config.min_predicted_depth,
            batch_size=self.config.batch_size,
        )
