"""MLDN weight files.

Header: magic "MLDN", version u32, layer count u32 (little-endian). Each
layer then stores kind u8, rank u8, rank dims as u32 and its float32
little-endian arrays in the order weight, bias, gamma, beta, running_mean,
running_var (whichever the layer has). Strides, paddings and the bottleneck
shape are not stored; they come from the architecture config.
"""
import logging
import struct
from pathlib import Path
from typing import Union

import numpy as np

from app.core.errors import FormatError, MissingAsset
from app.models.network import ArchitectureConfig, NetworkParams
from app.services.depth_network.network import build_specs, init_params

logger = logging.getLogger(__name__)

MAGIC = b"MLDN"
VERSION = 1
KIND_CODES = {"conv": 0, "batchnorm": 1, "relu": 2, "fullyconnected": 3, "transposedconv": 4}
ARRAY_ORDER = ("weight", "bias", "gamma", "beta", "running_mean", "running_var")


def _layer_shape(layer: dict) -> tuple:
    if "weight" in layer:
        return layer["weight"].shape
    if "gamma" in layer:
        return layer["gamma"].shape
    return ()


def save_weights(path: Union[str, Path], params: NetworkParams) -> None:
    chunks = [MAGIC, struct.pack("<2I", VERSION, len(params.specs))]
    for spec, layer in zip(params.specs, params.arrays):
        shape = _layer_shape(layer)
        chunks.append(struct.pack("<2B", KIND_CODES[spec.kind], len(shape)))
        chunks.append(struct.pack(f"<{len(shape)}I", *shape))
        for name in ARRAY_ORDER:
            if name in layer:
                chunks.append(np.ascontiguousarray(layer[name], dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))
    logger.info(f"Saved {len(params.specs)} network layers to {path}")


def load_weights(path: Union[str, Path], arch: ArchitectureConfig) -> NetworkParams:
    """
    Read an MLDN file into the layer plan of ``arch``.

    Raises:
        MissingAsset: The file does not exist
        FormatError: Magic, version, layer kinds or shapes disagree with ``arch``
    """
    path = Path(path)
    if not path.is_file():
        raise MissingAsset(f"weight file not found: {path}")
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise FormatError(f"{path} is not an MLDN weight file")
    version, count = struct.unpack_from("<2I", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported weight file version {version}")

    params = init_params(build_specs(arch), seed=0)
    if count != len(params.specs):
        raise FormatError(f"weight file has {count} layers, architecture has {len(params.specs)}")

    offset = 12
    try:
        for spec, layer in zip(params.specs, params.arrays):
            kind, rank = struct.unpack_from("<2B", data, offset)
            offset += 2
            dims = struct.unpack_from(f"<{rank}I", data, offset)
            offset += 4 * rank
            if kind != KIND_CODES[spec.kind] or tuple(dims) != _layer_shape(layer):
                raise FormatError(f"layer {spec.kind} in {path} does not match the architecture")
            for name in ARRAY_ORDER:
                if name not in layer:
                    continue
                n = layer[name].size
                values = np.frombuffer(data, dtype="<f4", count=n, offset=offset)
                layer[name] = values.reshape(layer[name].shape).astype(np.float32)
                offset += 4 * n
    except struct.error as e:
        raise FormatError(f"weight file {path} is truncated") from e
    except ValueError as e:
        if isinstance(e, FormatError):
            raise
        raise FormatError(f"weight file {path} is truncated") from e
    if offset != len(data):
        raise FormatError(f"weight file {path} has trailing bytes")
    logger.info(f"Loaded {count} network layers from {path}")
    return params
