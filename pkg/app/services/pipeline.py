"""Stage orchestration of a full pipeline run.

Every stage reads its inputs from files and writes its artifacts into the
output directory, so a stage can be rerun on its own:

    extract-stacks -> train | load-weights -> predict -> filter -> align -> fuse -> eval
"""
import hashlib
import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Union

from pydantic import ValidationError

from app.core.config import settings
from app.core.errors import (
    MissingAsset,
    NoOverlap,
    NoTrainingData,
    PipelineError,
    StageError,
    UsageError,
)
from app.models.alignment import LinearScaleModel
from app.models.camera import StereoRig
from app.models.grid import MicrolensGrid
from app.models.image import DepthMap, RawBayerImage, RgbImage
from app.models.metrics import MetricsReport
from app.models.network import NetworkParams
from app.models.pipeline import PipelineConfig, RunManifest
from app.models.stack import FlowerStackBatch, SparseDepthMap
from app.services.alignment import ScaleAligner, fuse, read_model_report, sample_correspondences, write_model_report
from app.services.depth_network.trainer import DepthNetworkTrainer, write_loss_history
from app.services.depth_network.weights import load_weights, save_weights
from app.services.hexgrid import build_grid, load_grid_calibration
from app.services.image_io import (
    read_depth_pfm,
    read_disparity_pfm,
    read_key_values,
    read_ppm,
    read_raw_bayer,
    read_sparse_csv,
    write_depth_pfm,
    write_disparity_pfm,
    write_sparse_csv,
)
from app.services.metrics import (
    DepthEvaluator,
    compare_reports,
    random_depth_baseline,
    render_table,
    write_comparison_csv,
    write_metrics_report,
)
from app.services.plenoptic import PlenopticProcessor, debayer, load_stack_archive, save_stack_archive
from app.services.stereo.processor import StereoProcessor
from app.services.stereo.rectification import load_rig_calibration, rectify

logger = logging.getLogger(__name__)

ARTIFACTS = {
    "stacks": "stacks.lfst",
    "weights": "weights.mldn",
    "loss": "loss.csv",
    "stereo_gt": "stereo_gt_sparse.csv",
    "stereo_disparity": "stereo_disparity.pfm",
    "plenoptic_depth": "plenoptic_stereo_depth.pfm",
    "predicted": "predicted_sparse.csv",
    "filtered": "filtered_sparse.csv",
    "alignment": "alignment.txt",
    "fused": "fused_depth.pfm",
    "metrics": "metrics.json",
    "sparse_metrics": "sparse_metrics.json",
    "comparison_csv": "comparison.csv",
    "comparison_txt": "comparison.txt",
    "manifest": "manifest.json",
}


def load_config(path: Optional[Union[str, Path]] = None, overrides: Optional[Dict[str, object]] = None) -> PipelineConfig:
    """
    Build a run configuration.

    Precedence, lowest first: field defaults, the key-value file, the
    OUTPUT_DIR environment variable, then explicit overrides.

    Args:
        path: Key-value configuration file whose keys are field names
        overrides: Values taking precedence over the file (None entries ignored)

    Returns:
        Validated PipelineConfig
    """
    values: Dict[str, object] = dict(read_key_values(path)) if path else {}
    if settings.OUTPUT_DIR:
        values["output_dir"] = settings.OUTPUT_DIR
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return PipelineConfig(**values)
    except ValidationError as e:
        logger.error(f"Invalid pipeline configuration: {str(e)}")
        raise UsageError(f"invalid configuration: {str(e)}") from e


def _format_value(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return str(value)


def save_config(path: Union[str, Path], config: PipelineConfig) -> None:
    """Write a configuration that ``load_config`` reads back unchanged."""
    lines = [f"{key}={_format_value(value)}" for key, value in config.model_dump(exclude_none=True).items()]
    Path(path).write_text("\n".join(lines) + "\n")


def sha256_file(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def read_image(path: Union[str, Path], pattern: str = "RGGB") -> Union[RawBayerImage, RgbImage]:
    """A PPM is read as RGB, anything else as a raw Bayer PGM."""
    return read_ppm(path) if Path(path).suffix.lower() == ".ppm" else read_raw_bayer(path, pattern)


def _same_config(manifest: RunManifest, config: PipelineConfig) -> bool:
    try:
        return PipelineConfig(**manifest.config) == config
    except ValidationError:
        return False


def config_from_manifest(path: Union[str, Path]) -> PipelineConfig:
    """The exact configuration recorded by a previous run."""
    if not Path(path).is_file():
        raise MissingAsset(f"manifest not found: {path}")
    manifest = RunManifest.model_validate_json(Path(path).read_text())
    return PipelineConfig(**manifest.config)


class PipelineRunner:
    """Runs pipeline stages against the files named by a configuration"""

    def __init__(self, config: Optional[PipelineConfig] = None):
        self.config = config or PipelineConfig()
        self.output_dir = Path(self.config.output_dir)
        self.stages: List[str] = []

    def path(self, artifact: str) -> Path:
        return self.output_dir / ARTIFACTS[artifact]

    def _require(self, key: str) -> str:
        value = getattr(self.config, key)
        if value is None:
            raise UsageError(f"configuration key '{key}' is required")
        return value

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        """Log a stage and wrap its failures in a StageError naming it."""
        logger.info(f"Running stage {name}")
        self.output_dir.mkdir(parents=True, exist_ok=True)
        try:
            yield
        except StageError:
            raise
        except (PipelineError, ValueError, ArithmeticError, OSError) as e:
            logger.error(f"Stage {name} failed: {str(e)}")
            raise StageError(name, e) from e
        self.stages.append(name)

    # Inputs

    def load_grid(self) -> MicrolensGrid:
        calib = load_grid_calibration(self._require("grid_calibration"), lattice=self.config.lattice)
        return build_grid(calib)

    def load_plenoptic(self) -> RgbImage:
        image = read_image(self._require("raw_plenoptic"), self.config.bayer_pattern)
        return debayer(image) if isinstance(image, RawBayerImage) else image

    def load_rig(self) -> StereoRig:
        """Rectified rig; its focal length and baseline give the metric disparity scale."""
        rig = load_rig_calibration(self._require("rig_calibration"))
        size = None
        if self.config.stereo_left and Path(self.config.stereo_left).is_file():
            left = read_image(self.config.stereo_left, self.config.bayer_pattern)
            size = (left.width, left.height)
        return rectify(rig, size=size).rig

    def load_stacks(self) -> FlowerStackBatch:
        path = self.path("stacks")
        if not path.is_file():
            raise MissingAsset(f"{path} not found; run extract-stacks first")
        return load_stack_archive(path)

    def _sparse_artifact(self, artifact: str, producer: str) -> SparseDepthMap:
        path = self.path(artifact)
        if not path.is_file():
            raise MissingAsset(f"{path} not found; run {producer} first")
        return read_sparse_csv(path, source="predicted")

    # Stages

    def extract_stacks(self) -> FlowerStackBatch:
        with self.stage("extract-stacks"):
            batch = PlenopticProcessor(self.config).extract_stacks(self.load_plenoptic(), self.load_grid())
            save_stack_archive(self.path("stacks"), batch)
        return batch

    def stereo_ground_truth(self) -> SparseDepthMap:
        cfg = self.config
        with self.stage("stereo-gt"):
            left = read_image(self._require("stereo_left"), cfg.bayer_pattern)
            right = read_image(self._require("stereo_right"), cfg.bayer_pattern)
            rig = load_rig_calibration(self._require("rig_calibration"))
            result = StereoProcessor(cfg).ground_truth(left, right, rig, self.load_grid())
            write_sparse_csv(self.path("stereo_gt"), result.sparse)
            write_disparity_pfm(self.path("stereo_disparity"), result.disparity)
            write_depth_pfm(self.path("plenoptic_depth"), result.plenoptic_depth)
        return result.sparse

    def ground_truth(self) -> SparseDepthMap:
        """Sparse training targets: the configured CSV, else stereo ground truth."""
        cfg = self.config
        if cfg.gt_sparse:
            return read_sparse_csv(cfg.gt_sparse, source="stereo-gt")
        if cfg.stereo_left and cfg.stereo_right:
            return self.stereo_ground_truth()
        raise NoTrainingData("training needs gt_sparse or a stereo pair (stereo_left, stereo_right)")

    def train(self) -> NetworkParams:
        with self.stage("train"):
            stacks = self.load_stacks()
            result = DepthNetworkTrainer(self.config).fit(stacks, self.ground_truth())
            save_weights(self.path("weights"), result.params)
            write_loss_history(self.path("loss"), result.loss_history)
        return result.params

    def _weights(self) -> NetworkParams:
        path = self.path("weights") if self.config.train else self.config.weights
        if path is None:
            raise MissingAsset("no weights file is configured and training is disabled; set weights or train=true")
        return load_weights(path, self.config.architecture())

    def load_weights(self) -> NetworkParams:
        with self.stage("load-weights"):
            params = self._weights()
        return params

    def predict(self, params: Optional[NetworkParams] = None) -> SparseDepthMap:
        with self.stage("predict"):
            if params is None:
                params = self._weights()
            predicted = DepthNetworkTrainer(self.config).predict(params, self.load_stacks())
            write_sparse_csv(self.path("predicted"), predicted)
        return predicted

    def texture_filter(self) -> SparseDepthMap:
        with self.stage("filter"):
            predicted = self._sparse_artifact("predicted", "predict")
            filtered = PlenopticProcessor(self.config).texture_filter(predicted, self.load_stacks())
            write_sparse_csv(self.path("filtered"), filtered)
        return filtered

    def align(self) -> LinearScaleModel:
        with self.stage("align"):
            dense = read_disparity_pfm(self._require("relative_disparity"), frame="relative")
            sparse = self._sparse_artifact("filtered", "filter")
            pairs = sample_correspondences(dense, sparse, self.load_rig())
            model = ScaleAligner(self.config).fit(pairs)
            write_model_report(self.path("alignment"), model)
        return model

    def fuse_depth(self) -> DepthMap:
        with self.stage("fuse"):
            dense = read_disparity_pfm(self._require("relative_disparity"), frame="relative")
            model_path = self.path("alignment")
            if not model_path.is_file():
                raise MissingAsset(f"{model_path} not found; run align first")
            depth = fuse(dense, read_model_report(model_path), self.load_rig(), d_min=self.config.disparity_min)
            write_depth_pfm(self.path("fused"), depth)
        return depth

    def evaluate(self) -> Optional[MetricsReport]:
        """Metrics of the fused depth against gt_depth plus a random baseline row."""
        cfg = self.config
        if cfg.gt_depth is None:
            logger.warning("No gt_depth configured; skipping evaluation")
            return None
        with self.stage("eval"):
            evaluator = DepthEvaluator(cfg)
            gt = read_depth_pfm(cfg.gt_depth)
            fused = read_depth_pfm(self.path("fused"))
            report = evaluator.evaluate(fused, gt)
            write_metrics_report(self.path("metrics"), report)

            baseline = evaluator.evaluate(random_depth_baseline(gt, cfg.seed), gt)
            table = compare_reports([("fused", report), ("random", baseline)])
            write_comparison_csv(self.path("comparison_csv"), table)
            self.path("comparison_txt").write_text(render_table(table))

            if cfg.gt_sparse and self.path("filtered").is_file():
                try:
                    sparse_report = evaluator.evaluate(
                        read_sparse_csv(self.path("filtered"), source="predicted"),
                        read_sparse_csv(cfg.gt_sparse, source="stereo-gt"),
                    )
                    write_metrics_report(self.path("sparse_metrics"), sparse_report)
                except NoOverlap:
                    logger.warning("Filtered predictions share no lens with gt_sparse; no sparse metrics")
        return report

    # Whole run

    def write_manifest(self, command: str) -> RunManifest:
        """
        Record the configuration, seeds, stages run and the hash of every artifact.

        Single-stage commands extend the manifest an earlier command left in
        the same directory for the same configuration; a full ``run`` starts
        a new one.
        """
        manifest_path = self.path("manifest")
        artifacts = {
            p.name: sha256_file(p)
            for p in sorted(self.output_dir.iterdir())
            if p.is_file() and p.name in ARTIFACTS.values() and p != manifest_path
        }
        config = self.config.model_dump()
        commands, stages = [command], list(self.stages)
        previous = self._previous_manifest() if command != "run" else None
        if previous is not None:
            if _same_config(previous, self.config):
                commands = previous.commands + commands
                stages = previous.stages + stages
            else:
                logger.warning(f"Configuration changed since {manifest_path} was written; starting a new manifest")
        manifest = RunManifest(
            command=command,
            commands=commands,
            config=config,
            seeds={"seed": self.config.seed},
            stages=stages,
            artifacts=artifacts,
        )
        manifest_path.write_text(manifest.model_dump_json(indent=2) + "\n")
        return manifest

    def _previous_manifest(self) -> Optional[RunManifest]:
        path = self.path("manifest")
        if not path.is_file():
            return None
        try:
            return RunManifest.model_validate_json(path.read_text())
        except ValidationError as e:
            logger.warning(f"Ignoring unreadable manifest {path}: {str(e)}")
            return None

    def run(self) -> RunManifest:
        self.extract_stacks()
        params = self.train() if self.config.train else self.load_weights()
        self.predict(params)
        self.texture_filter()
        self.align()
        self.fuse_depth()
        self.evaluate()
        manifest = self.write_manifest("run")
        logger.info(f"Pipeline finished: {len(manifest.artifacts)} artifacts in {self.output_dir}")
        return manifest


def run_pipeline(config: PipelineConfig) -> RunManifest:
    return PipelineRunner(config).run()
