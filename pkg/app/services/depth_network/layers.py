"""Forward and analytic backward passes of the network's layer kinds.

All tensors are channels-first (N, C, H, W). Every forward returns the
output and a cache consumed by the matching backward; every backward
returns the input gradient and a dict of parameter gradients. The
functions work in whatever float dtype they are given.
"""
from typing import Dict, Tuple

import numpy as np

from app.core.errors import ShapeMismatch

Cache = Dict[str, object]
Grads = Dict[str, np.ndarray]

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def transposed_output_size(size: int, kernel: int, stride: int, padding: int, output_padding: int) -> int:
    return (size - 1) * stride - 2 * padding + kernel + output_padding


def _span(start: int, count: int, stride: int) -> slice:
    return slice(start, start + stride * (count - 1) + 1, stride)


def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, padding: int) -> Tuple[np.ndarray, Cache]:
    """
    2D cross-correlation.

    Args:
        x: (N, Cin, H, W) input
        w: (Cout, Cin, k, k) weights
        b: (Cout,) bias
        stride: Stride in both directions
        padding: Zero padding on every side

    Returns:
        (N, Cout, Ho, Wo) output and the cache
    """
    n, cin, h, wd = x.shape
    cout, wcin, k, _ = w.shape
    if cin != wcin:
        raise ShapeMismatch(f"conv expects {wcin} input channels, got {cin}")
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(wd, k, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((cout, n, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, _span(i, ho, stride), _span(j, wo, stride)]
            out += np.tensordot(w[:, :, i, j], patch, axes=([1], [1]))
    out = out.transpose(1, 0, 2, 3) + b.reshape(1, -1, 1, 1)
    return out, {"xp": xp, "w": w, "stride": stride, "padding": padding, "x_shape": x.shape}


def conv_backward(dout: np.ndarray, cache: Cache) -> Tuple[np.ndarray, Grads]:
    xp, w = cache["xp"], cache["w"]
    stride, padding = cache["stride"], cache["padding"]
    _, _, h, wd = cache["x_shape"]
    _, _, ho, wo = dout.shape
    k = w.shape[2]
    dw = np.zeros_like(w)
    dxp = np.zeros_like(xp)
    for i in range(k):
        for j in range(k):
            rows, cols = _span(i, ho, stride), _span(j, wo, stride)
            dw[:, :, i, j] = np.tensordot(dout, xp[:, :, rows, cols], axes=([0, 2, 3], [0, 2, 3]))
            dxp[:, :, rows, cols] += np.tensordot(w[:, :, i, j], dout, axes=([0], [1])).transpose(1, 0, 2, 3)
    dx = dxp[:, :, padding:padding + h, padding:padding + wd]
    return dx, {"weight": dw, "bias": dout.sum(axis=(0, 2, 3))}


def transposed_conv_forward(
    x: np.ndarray,
    w: np.ndarray,
    b: np.ndarray,
    stride: int,
    padding: int,
    output_padding: int,
) -> Tuple[np.ndarray, Cache]:
    """
    Transposed convolution, i.e. the input gradient of a strided convolution.

    Args:
        x: (N, Cin, H, W) input
        w: (Cin, Cout, k, k) weights
        b: (Cout,) bias

    Returns:
        (N, Cout, Ho, Wo) output with Ho = (H-1)*stride - 2*padding + k + output_padding
    """
    n, cin, h, wd = x.shape
    wcin, cout, k, _ = w.shape
    if cin != wcin:
        raise ShapeMismatch(f"transposed conv expects {wcin} input channels, got {cin}")
    ho = transposed_output_size(h, k, stride, padding, output_padding)
    wo = transposed_output_size(wd, k, stride, padding, output_padding)
    full_h = max((h - 1) * stride + k, padding + ho)
    full_w = max((wd - 1) * stride + k, padding + wo)
    yp = np.zeros((n, cout, full_h, full_w), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            contrib = np.tensordot(w[:, :, i, j], x, axes=([0], [1]))
            yp[:, :, _span(i, h, stride), _span(j, wd, stride)] += contrib.transpose(1, 0, 2, 3)
    out = yp[:, :, padding:padding + ho, padding:padding + wo] + b.reshape(1, -1, 1, 1)
    cache = {"x": x, "w": w, "stride": stride, "padding": padding, "full": (full_h, full_w)}
    return out, cache


def transposed_conv_backward(dout: np.ndarray, cache: Cache) -> Tuple[np.ndarray, Grads]:
    x, w = cache["x"], cache["w"]
    stride, padding = cache["stride"], cache["padding"]
    n, _, h, wd = x.shape
    _, cout, k, _ = w.shape
    _, _, ho, wo = dout.shape
    dyp = np.zeros((n, cout) + tuple(cache["full"]), dtype=dout.dtype)
    dyp[:, :, padding:padding + ho, padding:padding + wo] = dout
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    for i in range(k):
        for j in range(k):
            window = dyp[:, :, _span(i, h, stride), _span(j, wd, stride)]
            dx += np.tensordot(w[:, :, i, j], window, axes=([1], [1])).transpose(1, 0, 2, 3)
            dw[:, :, i, j] = np.tensordot(x, window, axes=([0, 2, 3], [0, 2, 3]))
    return dx, {"weight": dw, "bias": dout.sum(axis=(0, 2, 3))}


def batchnorm_forward(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
) -> Tuple[np.ndarray, Cache]:
    """
    Per-channel batch normalization.

    In train mode batch statistics are used and the running statistics are
    updated in place (unbiased variance, momentum 0.1). In eval mode the
    running statistics are used, making the layer a fixed affine map.
    """
    shape = (1, -1, 1, 1)
    if train:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        running_mean *= 1.0 - BN_MOMENTUM
        running_mean += BN_MOMENTUM * mean
        running_var *= 1.0 - BN_MOMENTUM
        running_var += BN_MOMENTUM * var * count / max(count - 1, 1)
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    x_hat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    out = gamma.reshape(shape) * x_hat + beta.reshape(shape)
    return out, {"x_hat": x_hat, "inv_std": inv_std, "gamma": gamma, "train": train}


def batchnorm_backward(dout: np.ndarray, cache: Cache) -> Tuple[np.ndarray, Grads]:
    shape = (1, -1, 1, 1)
    x_hat, inv_std, gamma = cache["x_hat"], cache["inv_std"], cache["gamma"]
    grads = {"gamma": (dout * x_hat).sum(axis=(0, 2, 3)), "beta": dout.sum(axis=(0, 2, 3))}
    dx_hat = dout * gamma.reshape(shape)
    if not cache["train"]:
        return dx_hat * inv_std.reshape(shape), grads
    count = dout.shape[0] * dout.shape[2] * dout.shape[3]
    sum_dx_hat = dx_hat.sum(axis=(0, 2, 3)).reshape(shape)
    sum_dx_hat_x = (dx_hat * x_hat).sum(axis=(0, 2, 3)).reshape(shape)
    dx = inv_std.reshape(shape) / count * (count * dx_hat - sum_dx_hat - x_hat * sum_dx_hat_x)
    return dx, grads


def relu_forward(x: np.ndarray) -> Tuple[np.ndarray, Cache]:
    mask = x > 0
    return np.where(mask, x, 0).astype(x.dtype, copy=False), {"mask": mask}


def relu_backward(dout: np.ndarray, cache: Cache) -> Tuple[np.ndarray, Grads]:
    return np.where(cache["mask"], dout, 0).astype(dout.dtype, copy=False), {}


def fc_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, out_shape=None) -> Tuple[np.ndarray, Cache]:
    """
    Fully connected layer on the flattened input.

    Args:
        x: (N, ...) input, flattened per item
        w: (out_features, in_features) weights
        b: (out_features,) bias
        out_shape: Optional (C, H, W) to unflatten the output into

    Returns:
        (N, out_features) or (N, C, H, W) output and the cache
    """
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"fully connected layer expects {w.shape[1]} features, got {flat.shape[1]}")
    out = flat @ w.T + b
    if out_shape is not None:
        out = out.reshape((x.shape[0],) + tuple(out_shape))
    return out, {"flat": flat, "w": w, "x_shape": x.shape}


def fc_backward(dout: np.ndarray, cache: Cache) -> Tuple[np.ndarray, Grads]:
    flat, w = cache["flat"], cache["w"]
    d = dout.reshape(dout.shape[0], -1)
    dx = (d @ w).reshape(cache["x_shape"])
    return dx, {"weight": d.T @ flat, "bias": d.sum(axis=0)}
