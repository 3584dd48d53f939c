import numpy as np
import pytest

from app.core.errors import BehindFocalPlane, FormatError, InvalidRange, MissingAsset
from app.models.grid import GridCalibration
from app.models.image import DepthMap, RgbImage
from app.models.pipeline import PipelineConfig
from app.services.hexgrid import build_grid
from app.services.image_io import write_depth_pfm, write_pfm, write_ppm, write_raw_bayer
from app.services.lfs import (
    LfsDataset,
    ingest_lfs,
    load_manifest,
    metric_to_virtual,
    plenoptic_rgb,
    split_captures,
    virtual_depth_to_sparse,
    virtual_to_metric,
    write_manifest,
)
from app.services.plenoptic import mosaic


def write_capture(root, name="capture_00", height=24, width=32, raw=True, skip=()):
    capture = root / name
    capture.mkdir(parents=True)
    rgb = np.random.default_rng(0).random((3, height, width))
    if "plenoptic" not in skip:
        if raw:
            write_raw_bayer(capture / "plenoptic.pgm", mosaic(rgb))
        else:
            write_ppm(capture / "plenoptic.ppm", rgb)
    if "virtual" not in skip:
        write_pfm(capture / "virtual_depth.pfm", np.full((height, width), -40.0))
    if "natural" not in skip:
        write_ppm(capture / "natural.ppm", rgb)
    if "stereo" not in skip:
        write_depth_pfm(capture / "stereo_depth.pfm", DepthMap.from_array(np.full((height, width), 1.5)))
    return capture


def test_virtual_to_metric_unit_magnification():
    """Test that an image at twice the focal length gives an object at twice the focal length."""
    # a_img = 0.05 + 40 * 0.0005 = 0.07 = 2 * f_L
    assert virtual_to_metric(-40.0) == pytest.approx(0.07, rel=1e-12)


def test_virtual_to_metric_focal_plane():
    """Test the singularity at the main-lens focal plane."""
    # a_img = 0.05 - 30 * 0.0005 = f_L
    with pytest.raises(BehindFocalPlane):
        virtual_to_metric(30.0)
    with pytest.raises(BehindFocalPlane):
        virtual_to_metric(np.array([0.0, 35.0]))
    with pytest.raises(BehindFocalPlane):
        metric_to_virtual(0.02)


def test_virtual_to_metric_grows_towards_focal_plane():
    """Test that depth diverges as the image distance approaches f_L."""
    v = np.array([0.0, 20.0, 29.0, 29.9, 29.99])
    z = virtual_to_metric(v)
    assert np.all(np.diff(z) > 0)
    assert z[-1] > 100.0


def test_virtual_metric_round_trip():
    """Test the inverse mapping on a range of depths."""
    z = np.linspace(0.1, 10.0, 200)
    np.testing.assert_allclose(virtual_to_metric(metric_to_virtual(z)), z, rtol=1e-12)
    v = np.linspace(-60.0, 25.0, 200)
    np.testing.assert_allclose(metric_to_virtual(virtual_to_metric(v)), v, rtol=1e-12, atol=1e-12)


def test_thin_lens_parameters_come_from_config():
    """Test that the three lengths are configurable."""
    cfg = PipelineConfig(focal_length_m=0.05, mla_distance_m=0.08, mla_sensor_spacing_m=0.001)
    # a_img = 0.08 + 20 * 0.001 = 0.1 = 2 * f_L
    assert virtual_to_metric(-20.0, cfg) == pytest.approx(0.1, rel=1e-12)


def test_non_finite_virtual_depth_passes_through():
    """Test that missing virtual depth stays missing."""
    z = virtual_to_metric(np.array([-40.0, np.inf, np.nan]))
    assert z[0] == pytest.approx(0.07)
    assert np.isnan(z[1]) and np.isnan(z[2])


def test_ingest_complete_capture(tmp_path):
    """Test loading all four assets."""
    capture = ingest_lfs(write_capture(tmp_path))
    assert capture.capture_id == "capture_00"
    assert capture.virtual_depth.shape == (24, 32)
    assert capture.natural.data.shape == (3, 24, 32)
    assert capture.stereo_depth.valid.all()
    assert plenoptic_rgb(capture).data.shape == (3, 24, 32)


def test_ingest_debayered_plenoptic(tmp_path):
    """Test that an RGB plenoptic image is accepted as-is."""
    capture = ingest_lfs(write_capture(tmp_path, raw=False))
    assert isinstance(capture.plenoptic, RgbImage)
    assert plenoptic_rgb(capture) is capture.plenoptic


@pytest.mark.parametrize("asset", ["plenoptic", "virtual", "natural", "stereo"])
def test_ingest_missing_asset(tmp_path, asset):
    """Test that every missing asset is reported."""
    with pytest.raises(MissingAsset):
        ingest_lfs(write_capture(tmp_path, skip=(asset,)))


def test_ingest_errors(tmp_path):
    """Test a missing directory and mismatched asset sizes."""
    with pytest.raises(MissingAsset):
        ingest_lfs(tmp_path / "nowhere")

    capture = write_capture(tmp_path)
    write_pfm(capture / "virtual_depth.pfm", np.zeros((10, 10)))
    with pytest.raises(FormatError):
        ingest_lfs(capture)


def test_virtual_depth_to_sparse():
    """Test centroid sampling and conversion of a virtual depth image."""
    calib = GridCalibration(origin=(12.0, 12.0), pitch=24.0, rows=6, cols=7, sensor_width=160, sensor_height=120)
    grid = build_grid(calib)
    virtual = np.full((120, 160), -40.0)
    virtual[:, :80] = np.inf

    sparse = virtual_depth_to_sparse(virtual, grid)
    assert sparse.source == "raytrix"
    assert 0 < len(sparse) < len(grid)
    assert np.all(sparse.centroids[:, 0] >= 79.5)
    np.testing.assert_allclose(sparse.depths, 0.07)

    assert len(virtual_depth_to_sparse(np.full((120, 160), np.nan), grid)) == 0


def test_split_captures_sizes_and_determinism():
    """Test the 49/10 image-wise split."""
    ids = [f"capture_{i:02d}" for i in range(59)]
    split = split_captures(ids, n_test=10, seed=0)
    assert len(split.train) == 49
    assert len(split.test) == 10
    assert set(split.train) | set(split.test) == set(ids)
    assert not set(split.train) & set(split.test)
    assert split_captures(list(reversed(ids)), n_test=10, seed=0) == split

    with pytest.raises(InvalidRange):
        split_captures(ids[:5], n_test=10)


def test_manifest_round_trip(tmp_path):
    """Test writing and reading the split manifest."""
    split = split_captures([f"c{i}" for i in range(12)], n_test=3, seed=4)
    path = tmp_path / "manifest.csv"
    write_manifest(path, split)
    assert path.read_text().splitlines()[0] == "capture_id,split"
    assert load_manifest(path) == split

    bad = tmp_path / "bad.csv"
    bad.write_text("capture_id,split\nc0,validation\n")
    with pytest.raises(FormatError):
        load_manifest(bad)
    with pytest.raises(MissingAsset):
        load_manifest(tmp_path / "missing.csv")


def test_dataset_writes_split_once(tmp_path):
    """Test that a dataset root without manifest gets a seeded one."""
    for i in range(4):
        write_capture(tmp_path, name=f"capture_{i}")
    (tmp_path / "notes").mkdir()

    dataset = LfsDataset(tmp_path, PipelineConfig(seed=1))
    assert dataset.capture_ids() == [f"capture_{i}" for i in range(4)]
    split = dataset.split(n_test=1)
    assert (tmp_path / "manifest.csv").is_file()
    assert len(split.test) == 1
    assert dataset.split(n_test=2) == split
    assert dataset.capture(split.test[0]).capture_id == split.test[0]

    with pytest.raises(MissingAsset):
        LfsDataset(tmp_path / "missing")
