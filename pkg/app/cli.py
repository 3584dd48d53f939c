"""Command line surface of the pipeline.

Every PipelineConfig field is also a flag (``crop_size`` is ``--crop-size``);
flags override the ``--config`` file. Exit codes: 0 success, 1 usage error,
2 data error, 3 numeric failure.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional

from app.core.config import settings
from app.core.errors import PipelineError, UsageError
from app.models.image import DepthMap
from app.models.pipeline import PipelineConfig
from app.services.hexgrid import build_grid, load_grid_calibration
from app.services.image_io import write_depth_pfm, write_sparse_csv
from app.services.lfs import LfsDataset, ingest_lfs, virtual_depth_to_sparse, virtual_to_metric
from app.services.pipeline import PipelineRunner, config_from_manifest, load_config
from app.services.synth import default_grid_calibration, default_scene, write_synthetic_scene

logger = logging.getLogger(__name__)

STAGE_COMMANDS = {
    "extract-stacks": ("extract_stacks", "Crop flower stacks from the plenoptic image"),
    "train": ("train", "Train the depth network on sparse ground truth"),
    "predict": ("predict", "Predict sparse depth from flower stacks"),
    "filter": ("texture_filter", "Drop predictions on low-texture stacks"),
    "align": ("align", "Fit the relative-to-metric disparity model"),
    "fuse": ("fuse_depth", "Convert the relative disparity map to metric depth"),
    "eval": ("evaluate", "Evaluate the fused depth against ground truth"),
    "stereo-gt": ("stereo_ground_truth", "Compute sparse ground truth from the stereo pair"),
    "run": ("run", "Run every stage in order"),
}


class CliParser(argparse.ArgumentParser):
    """Argument parser reporting usage errors as exceptions instead of exiting with 2"""

    def error(self, message: str):
        raise UsageError(message)


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _config_parent() -> argparse.ArgumentParser:
    parent = CliParser(add_help=False)
    parent.add_argument("--config", help="Key-value configuration file")
    group = parent.add_argument_group("pipeline configuration")
    for name, field in PipelineConfig.model_fields.items():
        group.add_argument(_flag(name), dest=name, default=None, help=field.description or name.replace("_", " "))
    return parent


def build_parser() -> CliParser:
    parser = CliParser(prog="plenodepth", description="Metric depth from a single plenoptic capture")
    commands = parser.add_subparsers(dest="command", required=True)
    parent = _config_parent()

    for command, (_, help_text) in STAGE_COMMANDS.items():
        commands.add_parser(command, parents=[parent], help=help_text)

    replay = commands.add_parser("replay", parents=[parent], help="Rerun the configuration recorded in a manifest")
    replay.add_argument("--manifest", required=True, help="manifest.json of a previous run")

    synth = commands.add_parser("synth", parents=[parent], help="Write a synthetic scene and its run configuration")
    synth.add_argument("--depths", default="0.8,1.6", help="Comma separated plane depths in meters")
    synth.add_argument("--m-star", type=float, default=1.0, help="Scale of the relative disparity")
    synth.add_argument("--b-star", type=float, default=0.0, help="Offset of the relative disparity")
    synth.add_argument("--sensor-width", type=int, default=320)
    synth.add_argument("--sensor-height", type=int, default=240)
    synth.add_argument("--pitch", type=float, default=24.0, help="Microlens pitch in pixels")

    ingest = commands.add_parser("ingest", parents=[parent], help="Validate LFS captures and convert virtual depth")
    source = ingest.add_mutually_exclusive_group(required=True)
    source.add_argument("--capture", help="One capture directory")
    source.add_argument("--dataset", help="Dataset root; writes manifest.csv when missing")
    ingest.add_argument("--n-test", type=int, default=10, help="Test captures of a new split")
    return parser


def _config(args: argparse.Namespace) -> PipelineConfig:
    overrides = {name: getattr(args, name, None) for name in PipelineConfig.model_fields}
    return load_config(args.config, overrides)


def run_stage(args: argparse.Namespace) -> int:
    runner = PipelineRunner(_config(args))
    method, _ = STAGE_COMMANDS[args.command]
    getattr(runner, method)()
    if args.command != "run":
        runner.write_manifest(args.command)
    comparison = runner.path("comparison_txt")
    if args.command in ("eval", "run") and comparison.is_file():
        print(comparison.read_text(), end="")
    return 0


def run_replay(args: argparse.Namespace) -> int:
    config = config_from_manifest(args.manifest)
    if args.output_dir:
        config = config.model_copy(update={"output_dir": args.output_dir})
    PipelineRunner(config).run()
    return 0


def run_synth(args: argparse.Namespace) -> int:
    config = _config(args)
    try:
        depths = [float(d) for d in args.depths.split(",") if d.strip()]
    except ValueError as e:
        raise UsageError(f"invalid --depths: {args.depths}") from e
    calib = default_grid_calibration(args.sensor_width, args.sensor_height, args.pitch, config.lattice)
    scene = default_scene(depths, seed=config.seed)
    paths = write_synthetic_scene(config.output_dir, scene, calib, config, m_star=args.m_star, b_star=args.b_star)
    print(f"Wrote synthetic scene; run it with: run --config {paths['config']}")
    return 0


def run_ingest(args: argparse.Namespace) -> int:
    config = _config(args)
    if args.dataset:
        split = LfsDataset(args.dataset, config).split(n_test=args.n_test)
        print(f"{len(split.train)} train / {len(split.test)} test captures")
        return 0

    capture = ingest_lfs(args.capture, pattern=config.bayer_pattern)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    metric = virtual_to_metric(capture.virtual_depth, config)
    write_depth_pfm(out / "virtual_metric_depth.pfm", DepthMap.from_array(metric))
    if config.grid_calibration:
        grid = build_grid(load_grid_calibration(config.grid_calibration, lattice=config.lattice))
        sparse = virtual_depth_to_sparse(capture.virtual_depth, grid, config)
        write_sparse_csv(out / "raytrix_sparse.csv", sparse)
    print(f"Ingested capture {capture.capture_id}")
    return 0


COMMANDS: Dict[str, Callable[[argparse.Namespace], int]] = {
    **{command: run_stage for command in STAGE_COMMANDS},
    "replay": run_replay,
    "synth": run_synth,
    "ingest": run_ingest,
}


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(
        level=getattr(logging, settings.LOG_LEVEL.upper(), logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except PipelineError as e:
        logger.error(str(e))
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
