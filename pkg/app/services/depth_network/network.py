import logging
from typing import Dict, List, Literal, Tuple

import numpy as np

from app.core.errors import EmptyMask, ShapeMismatch
from app.models.network import ArchitectureConfig, LayerSpec, NetworkParams
from app.services.depth_network import layers

logger = logging.getLogger(__name__)

Mode = Literal["train", "eval"]


def build_specs(arch: ArchitectureConfig) -> List[LayerSpec]:
    """
    Lay out the encoder, MLP bottleneck and mirrored decoder.

    Every encoder conv (3x3, padding 1) is followed by batchnorm and ReLU.
    The bottleneck flattens the encoder output, runs it through
    ``mlp_features`` and expands back to the encoder output shape. The
    decoder uses transposed convs whose output padding reproduces each
    encoder resolution, ending in a single depth channel.

    Args:
        arch: Widths and strides of the network

    Returns:
        Ordered layer plan
    """
    specs: List[LayerSpec] = []
    sizes = [arch.patch_size]
    channels = [arch.in_channels]
    for out_ch, stride in zip(arch.encoder_channels, arch.encoder_strides):
        specs.append(LayerSpec(kind="conv", stride=stride, padding=1, in_channels=channels[-1], out_channels=out_ch))
        specs.append(LayerSpec(kind="batchnorm", in_channels=out_ch, out_channels=out_ch))
        specs.append(LayerSpec(kind="relu"))
        sizes.append(layers.conv_output_size(sizes[-1], 3, stride, 1))
        channels.append(out_ch)

    bottleneck = (channels[-1], sizes[-1], sizes[-1])
    flat = int(np.prod(bottleneck))
    features = [flat] + list(arch.mlp_features)
    for fin, fout in zip(features[:-1], features[1:]):
        specs.append(LayerSpec(kind="fullyconnected", in_features=fin, out_features=fout))
        specs.append(LayerSpec(kind="relu"))
    specs.append(LayerSpec(kind="fullyconnected", in_features=features[-1], out_features=flat, out_shape=bottleneck))
    specs.append(LayerSpec(kind="relu"))

    depth = len(arch.encoder_channels)
    for level in reversed(range(depth)):
        stride = arch.encoder_strides[level]
        in_ch = channels[level + 1]
        out_ch = channels[level] if level > 0 else 1
        base = layers.transposed_output_size(sizes[level + 1], 3, stride, 1, 0)
        output_padding = sizes[level] - base
        if not 0 <= output_padding < stride:
            raise ShapeMismatch(f"decoder cannot reproduce size {sizes[level]} from {sizes[level + 1]}")
        specs.append(
            LayerSpec(
                kind="transposedconv",
                stride=stride,
                padding=1,
                output_padding=output_padding,
                in_channels=in_ch,
                out_channels=out_ch,
            )
        )
        if level > 0:
            specs.append(LayerSpec(kind="batchnorm", in_channels=out_ch, out_channels=out_ch))
            specs.append(LayerSpec(kind="relu"))
    return specs


def init_params(specs: List[LayerSpec], seed: int = 0, dtype=np.float32) -> NetworkParams:
    """He-uniform weights, zero biases, unit gamma; drawn in layer order from one seeded stream."""
    rng = np.random.default_rng(seed)
    arrays: List[Dict[str, np.ndarray]] = []
    for spec in specs:
        k = spec.kernel_size
        if spec.kind == "conv":
            bound = np.sqrt(6.0 / (spec.in_channels * k * k))
            w = rng.uniform(-bound, bound, (spec.out_channels, spec.in_channels, k, k))
            arrays.append({"weight": w.astype(dtype), "bias": np.zeros(spec.out_channels, dtype=dtype)})
        elif spec.kind == "transposedconv":
            bound = np.sqrt(6.0 / (spec.in_channels * k * k))
            w = rng.uniform(-bound, bound, (spec.in_channels, spec.out_channels, k, k))
            arrays.append({"weight": w.astype(dtype), "bias": np.zeros(spec.out_channels, dtype=dtype)})
        elif spec.kind == "fullyconnected":
            bound = np.sqrt(6.0 / spec.in_features)
            w = rng.uniform(-bound, bound, (spec.out_features, spec.in_features))
            arrays.append({"weight": w.astype(dtype), "bias": np.zeros(spec.out_features, dtype=dtype)})
        elif spec.kind == "batchnorm":
            c = spec.out_channels
            arrays.append(
                {
                    "gamma": np.ones(c, dtype=dtype),
                    "beta": np.zeros(c, dtype=dtype),
                    "running_mean": np.zeros(c, dtype=dtype),
                    "running_var": np.ones(c, dtype=dtype),
                }
            )
        else:
            arrays.append({})
    return NetworkParams(specs=specs, arrays=arrays, seed=seed)


def build_network(arch: ArchitectureConfig, seed: int = 0) -> NetworkParams:
    specs = build_specs(arch)
    params = init_params(specs, seed)
    count = sum(v.size for layer in params.arrays for v in layer.values())
    logger.info(f"Built depth network: {len(specs)} layers, {count} values, seed {seed}")
    return params


def forward(params: NetworkParams, x: np.ndarray, mode: Mode = "eval") -> Tuple[np.ndarray, List[layers.Cache]]:
    """
    Run the network.

    Args:
        params: Layer plan and arrays; batchnorm running statistics are
            updated in place when ``mode`` is "train"
        x: (N, C, H, W) input batch
        mode: "train" uses batch statistics, "eval" the running ones

    Returns:
        Output tensor and the per-layer caches for ``backward``
    """
    if x.ndim != 4:
        raise ShapeMismatch(f"network input must be (N, C, H, W), got shape {x.shape}")
    first = params.specs[0]
    if first.kind in ("conv", "transposedconv") and x.shape[1] != first.in_channels:
        raise ShapeMismatch(f"network expects {first.in_channels} input channels, got {x.shape[1]}")
    train = mode == "train"
    caches: List[layers.Cache] = []
    out = x
    for spec, arr in zip(params.specs, params.arrays):
        if spec.kind == "conv":
            out, cache = layers.conv_forward(out, arr["weight"], arr["bias"], spec.stride, spec.padding)
        elif spec.kind == "transposedconv":
            out, cache = layers.transposed_conv_forward(
                out, arr["weight"], arr["bias"], spec.stride, spec.padding, spec.output_padding
            )
        elif spec.kind == "batchnorm":
            out, cache = layers.batchnorm_forward(
                out, arr["gamma"], arr["beta"], arr["running_mean"], arr["running_var"], train
            )
        elif spec.kind == "relu":
            out, cache = layers.relu_forward(out)
        else:
            out, cache = layers.fc_forward(out, arr["weight"], arr["bias"], spec.out_shape)
        caches.append(cache)
    return out, caches


_BACKWARD = {
    "conv": layers.conv_backward,
    "transposedconv": layers.transposed_conv_backward,
    "batchnorm": layers.batchnorm_backward,
    "relu": layers.relu_backward,
    "fullyconnected": layers.fc_backward,
}


def backward(params: NetworkParams, caches: List[layers.Cache], dout: np.ndarray) -> List[Dict[str, np.ndarray]]:
    """Gradients of every trainable array, aligned with ``params.arrays``."""
    if len(caches) != len(params.specs):
        raise ShapeMismatch("caches do not belong to this network")
    grads: List[Dict[str, np.ndarray]] = [{} for _ in params.specs]
    for i in reversed(range(len(params.specs))):
        dout, grads[i] = _BACKWARD[params.specs[i].kind](dout, caches[i])
    return grads


def masked_mse(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> float:
    """
    Masked mean squared error: sum(M * (pred - gt)^2) / sum(M).

    Raises:
        ShapeMismatch: The three tensors differ in shape
        EmptyMask: The mask selects no pixel
    """
    pred, gt, mask = np.asarray(pred), np.asarray(gt), np.asarray(mask)
    if pred.shape != gt.shape or pred.shape != mask.shape:
        raise ShapeMismatch("prediction, ground truth and mask must have equal shapes")
    total = float(np.sum(mask, dtype=np.float64))
    if total == 0:
        raise EmptyMask("loss mask selects no pixel")
    diff = (pred.astype(np.float64) - gt) * mask
    return float(np.sum(diff * diff) / total)


def masked_mse_grad(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Gradient of ``masked_mse`` with respect to ``pred``."""
    total = float(np.sum(mask, dtype=np.float64))
    if total == 0:
        raise EmptyMask("loss mask selects no pixel")
    return (2.0 * mask * (pred - gt) / total).astype(pred.dtype)
