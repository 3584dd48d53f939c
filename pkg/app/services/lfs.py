"""Light field and stereo (LFS) dataset ingestion.

A capture directory holds four assets:

    plenoptic.pgm | plenoptic.ppm   raw Bayer mosaic or debayered plenoptic image
    virtual_depth.pfm               virtual depth in multiples of the MLA-sensor spacing
    natural.ppm                     central-view image
    stereo_depth.pfm                metric depth from the stereo rig

A dataset root holds one directory per capture and an optional
``manifest.csv`` (capture_id,split) assigning each capture to train or test.

Virtual depth v is converted with a thin-lens model of the main lens: the
virtual focus lies at a_img = D - v * B_s behind the lens, and
1/f_L = 1/z + 1/a_img gives the object depth z = f_L * a_img / (a_img - f_L).
"""
import csv
import logging
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from app.core.errors import BehindFocalPlane, FormatError, InvalidRange, MissingAsset
from app.models.grid import MicrolensGrid
from app.models.image import RgbImage
from app.models.pipeline import DatasetSplit, LfsCapture, PipelineConfig
from app.models.stack import SparseDepthMap
from app.services.image_io import read_depth_pfm, read_pfm, read_ppm, read_raw_bayer
from app.services.plenoptic import debayer

logger = logging.getLogger(__name__)

PLENOPTIC_ASSETS = ("plenoptic.pgm", "plenoptic.ppm")
VIRTUAL_DEPTH_ASSET = "virtual_depth.pfm"
NATURAL_ASSET = "natural.ppm"
STEREO_DEPTH_ASSET = "stereo_depth.pfm"
MANIFEST_NAME = "manifest.csv"

# Image distances closer than this (relative to f_L) to the focal plane are rejected
FOCAL_GUARD = 1e-12


def _asset(capture_dir: Path, name: str) -> Path:
    path = capture_dir / name
    if not path.is_file():
        raise MissingAsset(f"capture {capture_dir.name} has no {name}")
    return path


def ingest_lfs(capture_dir: Union[str, Path], pattern: str = "RGGB") -> LfsCapture:
    """
    Load and validate one capture directory.

    Args:
        capture_dir: Directory holding the four assets
        pattern: Bayer pattern of a raw plenoptic PGM

    Returns:
        LfsCapture with the plenoptic image, virtual depth, natural image and
        stereo depth
    """
    capture_dir = Path(capture_dir)
    if not capture_dir.is_dir():
        raise MissingAsset(f"capture directory not found: {capture_dir}")

    plenoptic_path = next((capture_dir / n for n in PLENOPTIC_ASSETS if (capture_dir / n).is_file()), None)
    if plenoptic_path is None:
        raise MissingAsset(f"capture {capture_dir.name} has no plenoptic image")
    if plenoptic_path.suffix == ".ppm":
        plenoptic = read_ppm(plenoptic_path)
    else:
        plenoptic = read_raw_bayer(plenoptic_path, pattern)

    virtual = read_pfm(_asset(capture_dir, VIRTUAL_DEPTH_ASSET))
    natural = read_ppm(_asset(capture_dir, NATURAL_ASSET))
    stereo = read_depth_pfm(_asset(capture_dir, STEREO_DEPTH_ASSET))

    plenoptic_shape = (plenoptic.height, plenoptic.width)
    if virtual.ndim != 2 or virtual.shape != plenoptic_shape:
        raise FormatError(
            f"virtual depth {virtual.shape} does not match the plenoptic image {plenoptic_shape}"
        )
    if stereo.values.shape != (natural.height, natural.width):
        raise FormatError(
            f"stereo depth {stereo.values.shape} does not match the natural image "
            f"{(natural.height, natural.width)}"
        )

    logger.info(f"Ingested capture {capture_dir.name}: plenoptic {plenoptic.width}x{plenoptic.height}")
    return LfsCapture(
        capture_id=capture_dir.name,
        plenoptic=plenoptic,
        virtual_depth=virtual,
        natural=natural,
        stereo_depth=stereo,
    )


def _thin_lens(config: Optional[PipelineConfig]) -> PipelineConfig:
    return config or PipelineConfig()


def virtual_to_metric(v: Union[float, np.ndarray], config: Optional[PipelineConfig] = None) -> Union[float, np.ndarray]:
    """
    Metric object depth of virtual depth values.

    Non-finite inputs pass through as NaN.

    Args:
        v: Virtual depth (scalar or array)
        config: Source of f_L, D and B_s

    Returns:
        Depth in meters with the shape of ``v``
    """
    cfg = _thin_lens(config)
    f = cfg.focal_length_m
    values = np.asarray(v, dtype=np.float64)
    finite = np.isfinite(values)
    a_img = cfg.mla_distance_m - values * cfg.mla_sensor_spacing_m
    if np.any(a_img[finite] - f <= FOCAL_GUARD * f):
        raise BehindFocalPlane("virtual depth puts the image at or in front of the main-lens focal plane")
    with np.errstate(invalid="ignore", divide="ignore"):
        z = np.where(finite, f * a_img / (a_img - f), np.nan)
    return float(z) if z.ndim == 0 else z


def metric_to_virtual(z: Union[float, np.ndarray], config: Optional[PipelineConfig] = None) -> Union[float, np.ndarray]:
    """Inverse of ``virtual_to_metric``; depths must lie beyond the focal length."""
    cfg = _thin_lens(config)
    f = cfg.focal_length_m
    depth = np.asarray(z, dtype=np.float64)
    finite = np.isfinite(depth)
    if np.any(depth[finite] - f <= FOCAL_GUARD * f):
        raise BehindFocalPlane("objects at or inside the focal length have no real image")
    with np.errstate(invalid="ignore", divide="ignore"):
        a_img = f * depth / (depth - f)
        v = np.where(finite, (cfg.mla_distance_m - a_img) / cfg.mla_sensor_spacing_m, np.nan)
    return float(v) if v.ndim == 0 else v


def virtual_depth_to_sparse(
    virtual: np.ndarray,
    grid: MicrolensGrid,
    config: Optional[PipelineConfig] = None,
) -> SparseDepthMap:
    """
    Metric depth of the manufacturer's virtual depth at every microlens centroid.

    Centroids falling outside the image or on a non-finite virtual depth
    produce no entry.
    """
    virtual = np.asarray(virtual, dtype=np.float64)
    h, w = virtual.shape
    px = np.floor(grid.centroids + 0.5).astype(np.int64)
    inside = (px[:, 0] >= 0) & (px[:, 1] >= 0) & (px[:, 0] < w) & (px[:, 1] < h)
    samples = np.full(len(grid), np.nan)
    samples[inside] = virtual[px[inside, 1], px[inside, 0]]
    keep = np.isfinite(samples)
    if not np.any(keep):
        return SparseDepthMap.empty("raytrix")
    depths = virtual_to_metric(samples[keep], config)
    logger.info(f"Converted {int(keep.sum())} virtual depth samples to metric depth")
    return SparseDepthMap(
        coords=grid.axial[keep],
        centroids=grid.centroids[keep],
        depths=depths,
        source="raytrix",
    )


def plenoptic_rgb(capture: LfsCapture) -> RgbImage:
    """Debayered plenoptic image of a capture."""
    if isinstance(capture.plenoptic, RgbImage):
        return capture.plenoptic
    return debayer(capture.plenoptic)


def split_captures(capture_ids: Sequence[str], n_test: int = 10, seed: int = 0) -> DatasetSplit:
    """
    Seeded image-wise train/test split.

    Args:
        capture_ids: Capture identifiers (order does not matter)
        n_test: Number of test captures
        seed: Permutation seed

    Returns:
        DatasetSplit with both lists sorted
    """
    ids = sorted(capture_ids)
    if not 0 <= n_test <= len(ids):
        raise InvalidRange(f"cannot hold out {n_test} of {len(ids)} captures")
    order = np.random.default_rng(seed).permutation(len(ids))
    test = sorted(ids[i] for i in order[:n_test])
    train = sorted(ids[i] for i in order[n_test:])
    return DatasetSplit(train=train, test=test)


def write_manifest(path: Union[str, Path], split: DatasetSplit) -> None:
    rows = [(c, "train") for c in split.train] + [(c, "test") for c in split.test]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["capture_id", "split"])
        writer.writerows(sorted(rows))


def load_manifest(path: Union[str, Path]) -> DatasetSplit:
    if not Path(path).is_file():
        raise MissingAsset(f"manifest not found: {path}")
    train: List[str] = []
    test: List[str] = []
    try:
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                split = row["split"].strip()
                if split not in ("train", "test"):
                    raise ValueError(f"unknown split '{split}'")
                (train if split == "train" else test).append(row["capture_id"].strip())
    except (KeyError, ValueError) as e:
        logger.error(f"Invalid manifest {path}: {str(e)}")
        raise FormatError(f"invalid manifest {path}: {str(e)}") from e
    return DatasetSplit(train=sorted(train), test=sorted(test))


class LfsDataset:
    """A directory of captures with its train/test manifest"""

    def __init__(self, root: Union[str, Path], config: Optional[PipelineConfig] = None):
        self.root = Path(root)
        self.config = config or PipelineConfig()
        if not self.root.is_dir():
            raise MissingAsset(f"dataset root not found: {self.root}")

    def capture_ids(self) -> List[str]:
        """Sub-directories holding a plenoptic image."""
        return sorted(
            d.name
            for d in self.root.iterdir()
            if d.is_dir() and any((d / n).is_file() for n in PLENOPTIC_ASSETS)
        )

    def split(self, n_test: int = 10) -> DatasetSplit:
        """The shipped manifest, or a seeded split written next to the captures."""
        manifest = self.root / MANIFEST_NAME
        if manifest.is_file():
            return load_manifest(manifest)
        split = split_captures(self.capture_ids(), n_test=n_test, seed=self.config.seed)
        write_manifest(manifest, split)
        logger.info(f"Wrote dataset split {len(split.train)}/{len(split.test)} to {manifest}")
        return split

    def capture(self, capture_id: str) -> LfsCapture:
        return ingest_lfs(self.root / capture_id, pattern=self.config.bayer_pattern)
