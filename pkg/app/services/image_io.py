"""Readers and writers for the on-disk formats of the pipeline.

PGM (8/16-bit binary), PPM (8-bit binary RGB) and PFM (float32, rows
stored bottom-up) go through OpenCV's codecs. The sparse depth CSV
(q,r,u,v,depth_m) and the key-value text used for reports and
calibration files are handled here.
"""
import csv
import logging
from pathlib import Path
from typing import Dict, Union

import cv2
import numpy as np
from dotenv import dotenv_values

from app.core.errors import FormatError, MissingAsset
from app.models.image import DepthMap, DisparityMap, RawBayerImage, RgbImage
from app.models.stack import SparseDepthMap

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def _decode(path: PathLike, kind: str) -> np.ndarray:
    """Decode an image file as stored, without depth or channel conversion."""
    path = Path(path)
    if not path.is_file():
        raise MissingAsset(f"file not found: {path}")
    buffer = np.frombuffer(path.read_bytes(), dtype=np.uint8)
    try:
        image = cv2.imdecode(buffer, cv2.IMREAD_UNCHANGED)
    except cv2.error as e:
        raise FormatError(f"cannot decode {kind} {path}: {str(e)}") from e
    if image is None:
        raise FormatError(f"{path} is not a readable {kind} file")
    return image


def _encode(path: PathLike, extension: str, image: np.ndarray) -> None:
    try:
        ok, buffer = cv2.imencode(extension, image)
    except cv2.error as e:
        raise FormatError(f"cannot encode {path} as {extension}: {str(e)}") from e
    if not ok:
        raise FormatError(f"cannot encode {path} as {extension}")
    Path(path).write_bytes(buffer.tobytes())


def read_pgm(path: PathLike) -> np.ndarray:
    """Read a binary PGM as a uint8 or uint16 (H, W) array."""
    image = _decode(path, "PGM")
    if image.ndim != 2:
        raise FormatError(f"{path} is not a single-channel PGM")
    return image


def write_pgm(path: PathLike, image: np.ndarray, maxval: int = 65535) -> None:
    image = np.asarray(image)
    if image.ndim != 2:
        raise FormatError("PGM images must be 2D")
    dtype = np.uint16 if maxval > 255 else np.uint8
    _encode(path, ".pgm", np.clip(image, 0, maxval).astype(dtype))


def read_raw_bayer(path: PathLike, pattern: str = "RGGB") -> RawBayerImage:
    return RawBayerImage(pattern=pattern, samples=read_pgm(path).astype(np.uint16))


def write_raw_bayer(path: PathLike, raw: RawBayerImage) -> None:
    write_pgm(path, raw.samples, maxval=65535)


def read_ppm(path: PathLike) -> RgbImage:
    """Read a binary PPM into a normalized RGB image."""
    image = _decode(path, "PPM")
    if image.ndim != 3 or image.shape[2] != 3:
        raise FormatError(f"{path} is not an RGB PPM")
    scale = float(np.iinfo(image.dtype).max)
    rgb = cv2.cvtColor(image, cv2.COLOR_BGR2RGB).transpose(2, 0, 1) / scale
    return RgbImage(data=rgb)


def write_ppm(path: PathLike, image: Union[RgbImage, np.ndarray]) -> None:
    data = image.data if isinstance(image, RgbImage) else np.asarray(image, dtype=np.float64)
    if data.ndim == 2:
        data = np.repeat(data[None], 3, axis=0)
    data = np.nan_to_num(data, nan=0.0, posinf=1.0, neginf=0.0)
    pixels = np.floor(np.clip(data, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    bgr = cv2.cvtColor(np.ascontiguousarray(pixels.transpose(1, 2, 0)), cv2.COLOR_RGB2BGR)
    _encode(path, ".ppm", bgr)


def read_pfm(path: PathLike) -> np.ndarray:
    """Read a PFM as float64 (H, W) or (3, H, W), top row first."""
    image = _decode(path, "PFM")
    if image.dtype != np.float32:
        raise FormatError(f"{path} is not a PFM file")
    if image.ndim == 2:
        return image.astype(np.float64)
    return cv2.cvtColor(image, cv2.COLOR_BGR2RGB).transpose(2, 0, 1).astype(np.float64)


def write_pfm(path: PathLike, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 3 and image.shape[0] == 3:
        raster = cv2.cvtColor(np.ascontiguousarray(image.transpose(1, 2, 0)), cv2.COLOR_RGB2BGR)
    elif image.ndim == 2:
        raster = image
    else:
        raise FormatError("PFM images must be (H, W) or (3, H, W)")
    _encode(path, ".pfm", raster)


def write_depth_pfm(path: PathLike, depth: DepthMap) -> None:
    """Invalid pixels are stored as +inf."""
    write_pfm(path, np.where(depth.valid, depth.values, np.inf))


def read_depth_pfm(path: PathLike) -> DepthMap:
    return DepthMap.from_array(read_pfm(path))


def write_disparity_pfm(path: PathLike, disparity: DisparityMap) -> None:
    write_pfm(path, np.where(disparity.valid, disparity.values, np.inf))


def read_disparity_pfm(path: PathLike, frame: str = "relative") -> DisparityMap:
    values = read_pfm(path)
    if values.ndim != 2:
        raise FormatError(f"{path} must be a single-channel PFM")
    return DisparityMap.from_array(values, frame=frame)


def write_sparse_csv(path: PathLike, sparse: SparseDepthMap) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["q", "r", "u", "v", "depth_m"])
        for (q, r), (u, v), d in zip(sparse.coords, sparse.centroids, sparse.depths):
            writer.writerow([int(q), int(r), repr(float(u)), repr(float(v)), repr(float(d))])


def read_sparse_csv(path: PathLike, source: str = "stereo-gt") -> SparseDepthMap:
    if not Path(path).is_file():
        raise MissingAsset(f"file not found: {path}")
    coords, cents, depths = [], [], []
    try:
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                coords.append((int(row["q"]), int(row["r"])))
                cents.append((float(row["u"]), float(row["v"])))
                depths.append(float(row["depth_m"]))
    except (KeyError, ValueError) as e:
        raise FormatError(f"invalid sparse depth CSV {path}: {str(e)}") from e
    if not depths:
        return SparseDepthMap.empty(source)
    return SparseDepthMap(
        coords=np.array(coords), centroids=np.array(cents), depths=np.array(depths), source=source
    )


def write_key_values(path: PathLike, values: Dict[str, object]) -> None:
    lines = []
    for key, value in values.items():
        if isinstance(value, float):
            value = repr(value)
        elif isinstance(value, (list, tuple, np.ndarray)):
            value = ",".join(repr(float(v)) for v in np.ravel(value))
        lines.append(f"{key}={value}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_key_values(path: PathLike) -> Dict[str, str]:
    if not Path(path).is_file():
        raise MissingAsset(f"file not found: {path}")
    return {k: v for k, v in dotenv_values(path).items() if v is not None}
