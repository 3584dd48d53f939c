from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

LayerKind = Literal["conv", "batchnorm", "relu", "fullyconnected", "transposedconv"]


class LayerSpec(BaseModel):
    """Static description of one layer"""
    model_config = ConfigDict(frozen=True)

    kind: LayerKind
    kernel_size: int = 3
    stride: int = 1
    padding: int = 0
    output_padding: int = 0
    in_channels: int = 0
    out_channels: int = 0
    in_features: int = 0
    out_features: int = 0
    out_shape: Optional[Tuple[int, int, int]] = Field(None, description="Unflatten a fully connected output to (C, H, W)")


class ArchitectureConfig(BaseModel):
    """Widths and strides of the encoder / MLP bottleneck / decoder network"""
    in_channels: int = Field(21, ge=1, description="3 x microlenses per stack")
    patch_size: int = Field(23, ge=3, description="Crop side in pixels")
    encoder_channels: List[int] = Field(default_factory=lambda: [32, 64, 128, 256, 256])
    encoder_strides: List[int] = Field(default_factory=lambda: [2, 2, 2, 1, 1])
    mlp_features: List[int] = Field(default_factory=lambda: [512, 128, 512], description="Hidden widths of the bottleneck")

    @model_validator(mode="after")
    def _check(self) -> "ArchitectureConfig":
        if len(self.encoder_channels) != len(self.encoder_strides):
            raise ValueError("encoder_channels and encoder_strides must have equal length")
        return self


class NetworkParams(BaseModel):
    """Layer plan plus per-layer arrays (weight, bias, gamma, beta, running_mean, running_var)"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    specs: List[LayerSpec]
    arrays: List[Dict[str, np.ndarray]]
    seed: int = 0

    @model_validator(mode="after")
    def _check(self) -> "NetworkParams":
        if len(self.specs) != len(self.arrays):
            raise ValueError("one array dict per layer spec is required")
        return self

    def astype(self, dtype) -> "NetworkParams":
        return NetworkParams(
            specs=list(self.specs),
            arrays=[{k: v.astype(dtype) for k, v in layer.items()} for layer in self.arrays],
            seed=self.seed,
        )

    def clone(self) -> "NetworkParams":
        return NetworkParams(
            specs=list(self.specs),
            arrays=[{k: v.copy() for k, v in layer.items()} for layer in self.arrays],
            seed=self.seed,
        )

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for layer in self.arrays for v in layer.values())


class TrainConfig(BaseModel):
    """Optimisation settings of the depth network"""
    epochs: int = Field(125, ge=1)
    batch_size: int = Field(128, ge=1)
    learning_rate: float = Field(0.001, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    seed: int = 0


class AdamState(BaseModel):
    """First and second moments per trainable array plus the step counter"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    step: int = 0
    m: List[Dict[str, np.ndarray]] = Field(default_factory=list)
    v: List[Dict[str, np.ndarray]] = Field(default_factory=list)


class TrainResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    params: NetworkParams
    loss_history: List[float] = Field(..., description="Mean masked MSE per epoch")
