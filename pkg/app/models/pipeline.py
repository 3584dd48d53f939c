from typing import Any, Dict, List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from app.models.alignment import Estimator
from app.models.image import BayerPattern, DepthMap, RawBayerImage, RgbImage
from app.models.metrics import AggregationMode
from app.models.network import ArchitectureConfig, TrainConfig


class PipelineConfig(BaseModel):
    """Every path and stage parameter of a pipeline run.

    Loaded from a key-value text file; keys equal the field names.
    """
    model_config = ConfigDict(extra="forbid")

    # Paths
    raw_plenoptic: Optional[str] = Field(None, description="16-bit raw Bayer PGM of the plenoptic camera")
    stereo_left: Optional[str] = Field(None, description="Left raw Bayer PGM")
    stereo_right: Optional[str] = Field(None, description="Right raw Bayer PGM")
    relative_disparity: Optional[str] = Field(None, description="Dense relative disparity PFM")
    grid_calibration: Optional[str] = Field(None, description="Microlens grid calibration file")
    rig_calibration: Optional[str] = Field(None, description="Stereo rig calibration file")
    weights: Optional[str] = Field(None, description="Network weight file (MLDN)")
    gt_sparse: Optional[str] = Field(None, description="Sparse ground truth CSV q,r,u,v,depth_m")
    gt_depth: Optional[str] = Field(None, description="Dense ground-truth depth PFM for evaluation")
    output_dir: str = Field("output", description="Directory receiving every stage artifact")

    # Plenoptic processing
    bayer_pattern: BayerPattern = "RGGB"
    lattice: Literal["pointy", "flat"] = "pointy"
    crop_size: int = Field(23, ge=3)
    stack_rings: int = Field(1, ge=0, le=2, description="0 single lens, 1 flower stack, 2 double ring")
    texture_threshold: float = Field(0.02, ge=0)

    # Network
    train: bool = Field(False, description="Train instead of loading weights")
    epochs: int = Field(125, ge=1)
    batch_size: int = Field(128, ge=1)
    learning_rate: float = Field(0.001, gt=0)
    encoder_channels: List[int] = Field(default_factory=lambda: [32, 64, 128, 256, 256])
    encoder_strides: List[int] = Field(default_factory=lambda: [2, 2, 2, 1, 1])
    mlp_features: List[int] = Field(default_factory=lambda: [512, 128, 512])
    min_predicted_depth: float = Field(1e-3, gt=0, description="Floor applied to network outputs, meters")

    # Alignment
    estimator: Estimator = "theil-sen"
    theil_sen_mode: Literal["auto", "exact", "sampled"] = "auto"
    theil_sen_exact_limit: int = Field(2000, ge=2)
    theil_sen_samples: int = Field(1_000_000, ge=1)
    ransac_iterations: int = Field(1000, ge=1)
    ransac_threshold: float = Field(0.5, gt=0)
    huber_c: float = Field(1.345, gt=0)
    huber_max_iters: int = Field(100, ge=1)
    huber_tol: float = Field(1e-10, gt=0)
    sgd_learning_rate: float = Field(0.01, ge=0)
    sgd_epochs: int = Field(200, ge=1)
    sgd_delta: float = Field(1.345, gt=0)
    disparity_min: float = Field(1e-6, gt=0, description="Disparities at or below this are invalid")

    # Stereo
    sgm_d_min: int = 0
    sgm_d_max: int = 64
    sgm_p1: float = Field(8.0, ge=0)
    sgm_p2: float = Field(32.0, ge=0)
    sgm_census_window: int = Field(5, ge=3)
    sgm_uniqueness: float = Field(0.05, ge=0, lt=1)
    sgm_lr_threshold: float = Field(1.0, ge=0)
    sgm_subpixel: bool = True
    speckle_size: int = Field(50, ge=0)
    speckle_max_diff: float = Field(1.0, ge=0)
    gradient_threshold: float = Field(0.01, ge=0, description="Windowed Sobel magnitude below which matches are dropped")
    reproject_distort: bool = False

    # Evaluation
    metrics_mode: AggregationMode = "pooled"
    bpr_threshold: float = Field(0.25, gt=0)

    # Thin-lens model of the plenoptic main lens
    focal_length_m: float = Field(0.035, gt=0, description="Main-lens focal length f_L")
    mla_distance_m: float = Field(0.05, gt=0, description="Main-lens to MLA distance D")
    mla_sensor_spacing_m: float = Field(0.0005, gt=0, description="MLA to sensor spacing B_s")

    seed: int = 0

    @field_validator("encoder_channels", "encoder_strides", "mlp_features", mode="before")
    @classmethod
    def _split_ints(cls, v: Any) -> Any:
        if isinstance(v, str):
            return [int(p) for p in v.replace(" ", "").split(",") if p]
        return v

    def architecture(self) -> ArchitectureConfig:
        lenses = 1 + 3 * self.stack_rings * (self.stack_rings + 1)
        return ArchitectureConfig(
            in_channels=3 * lenses,
            patch_size=self.crop_size,
            encoder_channels=self.encoder_channels,
            encoder_strides=self.encoder_strides,
            mlp_features=self.mlp_features,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            seed=self.seed,
        )


class LfsCapture(BaseModel):
    """The four per-scene assets of a light field and stereo capture"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    capture_id: str
    plenoptic: Union[RawBayerImage, RgbImage]
    virtual_depth: np.ndarray = Field(..., description="Virtual depth in multiples of the MLA-sensor spacing")
    natural: RgbImage
    stereo_depth: DepthMap


class DatasetSplit(BaseModel):
    train: List[str]
    test: List[str]


class RunManifest(BaseModel):
    """Everything needed to reproduce a run: config, seeds and artifact hashes"""
    command: str = Field(..., description="Latest command that wrote the manifest")
    commands: List[str] = Field(default_factory=list, description="Every command recorded into this run directory")
    config: Dict[str, Any]
    seeds: Dict[str, int]
    stages: List[str] = Field(default_factory=list)
    artifacts: Dict[str, str] = Field(default_factory=dict, description="Artifact file name to sha256")
