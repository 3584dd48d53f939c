import json
import shutil

import numpy as np
import pytest

from app.cli import main
from app.core.config import settings
from app.services.image_io import read_depth_pfm, read_sparse_csv
from app.services.pipeline import load_config

SMALL_SENSOR = ["--sensor-width", "160", "--sensor-height", "120"]


@pytest.fixture(autouse=True)
def no_output_dir_env(monkeypatch):
    monkeypatch.setattr(settings, "OUTPUT_DIR", None)


def synth(tmp_path, *extra, name="scene"):
    scene = tmp_path / name
    assert main(["synth", "--output-dir", str(scene), *SMALL_SENSOR, *extra]) == 0
    return scene


def test_synth_command(tmp_path, capsys):
    """Test that synth writes a runnable configuration."""
    scene = synth(tmp_path, "--depths", "0.8,1.6", "--m-star", "2", "--b-star", "5")
    assert f"run --config {scene / 'run.cfg'}" in capsys.readouterr().out
    config = load_config(scene / "run.cfg")
    assert config.output_dir == str(scene / "run")
    assert (scene / "plenoptic.pgm").is_file()


def test_usage_errors_exit_with_one(tmp_path):
    """Test unknown flags, missing commands and invalid values."""
    assert main([]) == 1
    assert main(["align", "--no-such-flag"]) == 1
    assert main(["teleport"]) == 1
    assert main(["synth", "--output-dir", str(tmp_path), "--depths", "near,far"]) == 1
    assert main(["align", "--crop-size", "many"]) == 1


def test_missing_inputs_exit_with_two(tmp_path):
    """Test missing configuration files and capture directories."""
    assert main(["align", "--config", str(tmp_path / "missing.cfg")]) == 2
    assert main(["ingest", "--capture", str(tmp_path / "nowhere")]) == 2
    assert main(["replay", "--manifest", str(tmp_path / "manifest.json")]) == 2


def test_stage_out_of_order_exits_with_two(tmp_path):
    """Test a stage whose input artifact has not been produced."""
    scene = synth(tmp_path)
    assert main(["filter", "--config", str(scene / "run.cfg")]) == 2


def test_numeric_failure_exits_with_three(tmp_path):
    """Test a degenerate alignment on a single plane."""
    scene = synth(tmp_path, "--depths", "1.2")
    config = load_config(scene / "run.cfg")
    run_dir = scene / "run"
    run_dir.mkdir()
    shutil.copy(config.gt_sparse, run_dir / "filtered_sparse.csv")
    assert main(["align", "--config", str(scene / "run.cfg")]) == 3


def test_align_fuse_eval_commands(tmp_path, capsys):
    """Test the alignment stages one command at a time."""
    scene = synth(tmp_path, "--m-star", "2", "--b-star", "5")
    config = load_config(scene / "run.cfg")
    run_dir = scene / "run"
    run_dir.mkdir()
    shutil.copy(config.gt_sparse, run_dir / "filtered_sparse.csv")
    capsys.readouterr()

    cfg = ["--config", str(scene / "run.cfg")]
    assert main(["align", *cfg]) == 0
    assert main(["fuse", *cfg]) == 0
    assert main(["eval", *cfg]) == 0

    out = capsys.readouterr().out
    assert out.splitlines()[0].split()[0] == "method"
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert manifest["stages"] == ["align", "fuse", "eval"]
    assert manifest["commands"] == ["align", "fuse", "eval"]
    assert manifest["command"] == "eval"
    for name in ("alignment.txt", "fused_depth.pfm", "metrics.json", "filtered_sparse.csv"):
        assert name in manifest["artifacts"]
    fused = read_depth_pfm(run_dir / "fused_depth.pfm")
    truth = read_depth_pfm(config.gt_depth)
    np.testing.assert_allclose(fused.values[truth.valid], truth.values[truth.valid], rtol=1e-6)


def test_flags_override_config_file(tmp_path):
    """Test that a flag wins over the configuration file."""
    scene = synth(tmp_path)
    other = tmp_path / "elsewhere"
    assert main(["extract-stacks", "--config", str(scene / "run.cfg"), "--output-dir", str(other)]) == 0
    assert (other / "stacks.lfst").is_file()
    assert not (scene / "run" / "stacks.lfst").exists()


def test_ingest_capture_command(tmp_path, capsys):
    """Test converting the virtual depth of a capture."""
    scene = synth(tmp_path)
    out = tmp_path / "ingested"
    argv = ["ingest", "--capture", str(scene), "--output-dir", str(out), "--grid-calibration", str(scene / "grid.cfg")]
    assert main(argv) == 0
    assert "Ingested capture scene" in capsys.readouterr().out

    metric = read_depth_pfm(out / "virtual_metric_depth.pfm")
    truth = read_depth_pfm(scene / "stereo_depth.pfm")
    np.testing.assert_allclose(metric.values[truth.valid], truth.values[truth.valid], rtol=1e-4)
    assert len(read_sparse_csv(out / "raytrix_sparse.csv")) > 0


def test_ingest_dataset_command(tmp_path, capsys):
    """Test the dataset split through the command line."""
    for name in ("a", "b", "c"):
        synth(tmp_path / "dataset", name=name)
    capsys.readouterr()
    assert main(["ingest", "--dataset", str(tmp_path / "dataset"), "--n-test", "1"]) == 0
    assert "2 train / 1 test captures" in capsys.readouterr().out
    assert (tmp_path / "dataset" / "manifest.csv").is_file()


def test_changed_config_starts_new_manifest(tmp_path):
    """Test that a stage run with other settings does not extend the earlier record."""
    scene = synth(tmp_path, "--m-star", "2", "--b-star", "5")
    config = load_config(scene / "run.cfg")
    run_dir = scene / "run"
    run_dir.mkdir()
    shutil.copy(config.gt_sparse, run_dir / "filtered_sparse.csv")

    cfg = ["--config", str(scene / "run.cfg")]
    assert main(["align", *cfg]) == 0
    assert main(["align", *cfg, "--estimator", "huber"]) == 0

    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert manifest["stages"] == ["align"]
    assert manifest["config"]["estimator"] == "huber"
