import logging
import struct
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from app.core.errors import FormatError, MismatchedKeys, MissingAsset, OddDimensions, OutOfBounds, UnknownLens
from app.models.grid import AxialCoord, MicrolensGrid
from app.models.image import RawBayerImage, RgbImage
from app.models.pipeline import PipelineConfig
from app.models.stack import FlowerStack, FlowerStackBatch, SparseDepthMap
from app.services.hexgrid import hex_ring, window_inside

logger = logging.getLogger(__name__)

RAW_MAX = 65535.0

_G_KERNEL = np.array([[0, 1, 0], [1, 4, 1], [0, 1, 0]], dtype=np.float64)
_RB_KERNEL = np.array([[1, 2, 1], [2, 4, 2], [1, 2, 1]], dtype=np.float64)
_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)

ARCHIVE_MAGIC = b"LFST"
ARCHIVE_VERSION = 1
_RECORD = np.dtype([("q", "<i4"), ("r", "<i4"), ("cx", "<f4"), ("cy", "<f4")])


def bayer_masks(pattern: str, height: int, width: int) -> np.ndarray:
    """(3, H, W) boolean masks of the R, G and B sites of a mosaic."""
    masks = np.zeros((3, height, width), dtype=bool)
    channel = {"R": 0, "G": 1, "B": 2}
    for k, color in enumerate(pattern):
        dy, dx = divmod(k, 2)
        masks[channel[color], dy::2, dx::2] = True
    return masks


def debayer(raw: RawBayerImage) -> RgbImage:
    """
    Bilinear demosaicing by normalized convolution.

    Every site keeps its own sample in its own channel: only the kernel
    centre of that channel falls on a sampled pixel there, so the
    normalized sum is the sample itself. Green is interpolated from the
    four direct neighbours, red and blue from up to eight.

    Args:
        raw: 16-bit Bayer mosaic with even dimensions

    Returns:
        RGB image normalized by the 16-bit maximum
    """
    if raw.width % 2 or raw.height % 2:
        raise OddDimensions(f"raw image is {raw.width}x{raw.height}; both sides must be even")
    samples = raw.samples.astype(np.float64)
    masks = bayer_masks(raw.pattern, raw.height, raw.width).astype(np.float64)
    rgb = np.empty((3, raw.height, raw.width), dtype=np.float64)
    for c, kernel in enumerate((_RB_KERNEL, _G_KERNEL, _RB_KERNEL)):
        num = ndimage.convolve(samples * masks[c], kernel, mode="mirror")
        den = ndimage.convolve(masks[c], kernel, mode="mirror")
        rgb[c] = num / den
    return RgbImage(data=np.clip(rgb / RAW_MAX, 0.0, 1.0))


def mosaic(rgb: np.ndarray, pattern: str = "RGGB") -> RawBayerImage:
    """Sample a (3, H, W) image in [0, 1] through a Bayer filter."""
    rgb = np.asarray(rgb, dtype=np.float64)
    masks = bayer_masks(pattern, rgb.shape[1], rgb.shape[2])
    values = np.sum(np.where(masks, rgb, 0.0), axis=0)
    samples = np.floor(np.clip(values, 0.0, 1.0) * RAW_MAX + 0.5).astype(np.uint16)
    return RawBayerImage(pattern=pattern, samples=samples)


def _window_origin(centroid_px: Tuple[float, float], size: int) -> Tuple[int, int]:
    cx = int(np.floor(centroid_px[0] + 0.5))
    cy = int(np.floor(centroid_px[1] + 0.5))
    half = size // 2
    return cx - half, cy - half


def crop_microlens(img: RgbImage, centroid_px: Tuple[float, float], size: int = 23) -> np.ndarray:
    """3 x size x size window centered on the nearest-integer centroid."""
    x0, y0 = _window_origin(centroid_px, size)
    if x0 < 0 or y0 < 0 or x0 + size > img.width or y0 + size > img.height:
        raise OutOfBounds(f"crop window around {centroid_px} leaves the image", centroid=tuple(centroid_px))
    return img.data[:, y0:y0 + size, x0:x0 + size].copy()


def stack_offsets(rings: int) -> List[AxialCoord]:
    """Relative coordinates of a stack: center, then each ring in neighbour order."""
    origin = AxialCoord.of(0, 0)
    offsets = [origin]
    for ring in range(1, rings + 1):
        offsets.extend(hex_ring(origin, ring))
    return offsets


def build_flower_stack(
    img: RgbImage,
    grid: MicrolensGrid,
    a: AxialCoord,
    size: int = 23,
    rings: int = 1,
) -> Optional[FlowerStack]:
    """
    Crop the center lens and its ring neighbours into one stack.

    Returns:
        The FlowerStack, or None (discard) when a neighbour is missing from
        the grid or any crop leaves the image
    """
    if a not in grid:
        raise UnknownLens(f"lens ({a.q}, {a.r}) is not in the grid")
    crops = []
    for offset in stack_offsets(rings):
        b = a + offset
        if b not in grid:
            return None
        try:
            crops.append(crop_microlens(img, grid.centroid_of(b), size))
        except OutOfBounds:
            return None
    return FlowerStack(center=a, channels=np.concatenate(crops, axis=0), centroid_px=grid.centroid_of(a))


def texture_scores(patches: np.ndarray) -> np.ndarray:
    """Mean Sobel gradient magnitude of each (N, 3, H, W) RGB patch's grayscale."""
    gray = np.asarray(patches, dtype=np.float64).mean(axis=1)
    gx = ndimage.correlate(gray, _SOBEL_X[None], mode="reflect")
    gy = ndimage.correlate(gray, _SOBEL_X.T[None], mode="reflect")
    return np.sqrt(gx * gx + gy * gy).mean(axis=(1, 2))


def texture_score(stack: FlowerStack) -> float:
    """Mean Sobel magnitude over the grayscale central microlens patch."""
    return float(texture_scores(stack.center_patch()[None])[0])


def filter_sparse_depth(
    depths: SparseDepthMap,
    stacks: Union[Sequence[FlowerStack], FlowerStackBatch],
    threshold: float,
) -> SparseDepthMap:
    """
    Drop sparse samples whose central patch is weakly textured.

    Args:
        depths: Sparse depth map keyed by axial coordinate
        stacks: Stacks with exactly the same keys
        threshold: Minimum texture score to keep a sample

    Returns:
        Subset of ``depths`` with texture_score >= threshold
    """
    if isinstance(stacks, FlowerStackBatch):
        keys = [(int(q), int(r)) for q, r in stacks.coords]
        scores = texture_scores(stacks.tensor[:, :3])
    else:
        keys = [s.center.to_tuple() for s in stacks]
        scores = texture_scores(np.stack([s.center_patch() for s in stacks])) if stacks else np.zeros(0)
    score_by_key = dict(zip(keys, scores))
    if set(score_by_key) != set(depths.keys()) or len(score_by_key) != len(keys):
        raise MismatchedKeys("sparse depths and flower stacks are not keyed by the same lenses")
    keep = np.array([score_by_key[k] >= threshold for k in depths.keys()], dtype=bool)
    logger.info(f"Texture filter kept {int(keep.sum())} of {len(depths)} sparse samples")
    return depths.subset(keep)


class PlenopticProcessor:
    """Turns raw plenoptic captures into batches of flower stacks"""

    def __init__(self, config: Optional[PipelineConfig] = None):
        self.config = config or PipelineConfig()
        self.crop_size = self.config.crop_size
        self.rings = self.config.stack_rings

    def extract_stacks(self, img: RgbImage, grid: MicrolensGrid) -> FlowerStackBatch:
        """
        Build every flower stack of an image in grid order.

        Args:
            img: Debayered plenoptic image
            grid: Microlens grid of the image

        Returns:
            FlowerStackBatch holding only the stacks whose lenses all fit
        """
        size = self.crop_size
        offsets = stack_offsets(self.rings)
        members = np.full((len(grid), len(offsets)), -1, dtype=np.int64)
        for j, off in enumerate(offsets):
            for i, (q, r) in enumerate(grid.axial):
                members[i, j] = grid.index_of(AxialCoord.of(q + off.q, r + off.r))

        inside = window_inside(grid.centroids, size, img.width, img.height)
        ok = np.all(members >= 0, axis=1)
        ok[ok] = np.all(inside[members[ok]], axis=1)
        kept = np.flatnonzero(ok)
        if kept.size == 0:
            raise OutOfBounds("no flower stack fits inside the image")

        windows = sliding_window_view(img.data, (size, size), axis=(1, 2))
        origins = np.floor(grid.centroids + 0.5).astype(np.int64) - size // 2
        lens_ids = members[kept]
        x0 = origins[lens_ids, 0]
        y0 = origins[lens_ids, 1]
        # (3, n, L, size, size) -> (n, L * 3, size, size)
        crops = windows[:, y0, x0]
        tensor = crops.transpose(1, 2, 0, 3, 4).reshape(len(kept), 3 * len(offsets), size, size)

        logger.info(f"Extracted {len(kept)} flower stacks from {len(grid)} lenses")
        return FlowerStackBatch(
            tensor=tensor.astype(np.float32),
            coords=grid.axial[kept],
            centroids=grid.centroids[kept],
        )

    def texture_filter(self, depths: SparseDepthMap, stacks: FlowerStackBatch) -> SparseDepthMap:
        return filter_sparse_depth(depths, stacks, self.config.texture_threshold)


def save_stack_archive(path: Union[str, Path], batch: FlowerStackBatch) -> None:
    """Write the LFST archive: header, float32 tensor, then (q, r, cx, cy) records."""
    n, c, h, w = batch.tensor.shape
    records = np.zeros(n, dtype=_RECORD)
    records["q"] = batch.coords[:, 0]
    records["r"] = batch.coords[:, 1]
    records["cx"] = batch.centroids[:, 0]
    records["cy"] = batch.centroids[:, 1]
    header = ARCHIVE_MAGIC + struct.pack("<5I", ARCHIVE_VERSION, n, c, h, w)
    Path(path).write_bytes(header + batch.tensor.astype("<f4").tobytes() + records.tobytes())


def load_stack_archive(path: Union[str, Path]) -> FlowerStackBatch:
    if not Path(path).is_file():
        raise MissingAsset(f"flower stack archive not found: {path}")
    data = Path(path).read_bytes()
    if data[:4] != ARCHIVE_MAGIC:
        raise FormatError(f"{path} is not a flower stack archive")
    version, n, c, h, w = struct.unpack("<5I", data[4:24])
    if version != ARCHIVE_VERSION:
        raise FormatError(f"unsupported archive version {version}")
    count = n * c * h * w
    offset = 24
    tensor = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(n, c, h, w)
    offset += count * 4
    if len(data) != offset + n * _RECORD.itemsize:
        raise FormatError(f"archive {path} has an unexpected size")
    records = np.frombuffer(data, dtype=_RECORD, count=n, offset=offset)
    return FlowerStackBatch(
        tensor=tensor.astype(np.float32),
        coords=np.stack([records["q"], records["r"]], axis=1).astype(np.int64),
        centroids=np.stack([records["cx"], records["cy"]], axis=1).astype(np.float64),
    )
