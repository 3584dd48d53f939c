from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

Estimator = Literal["theil-sen", "ransac", "huber", "sgd-huber"]


class CorrespondenceSet(BaseModel):
    """Pairs of (relative disparity x, metric disparity y) at sparse pixels"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    x: np.ndarray = Field(..., description="Relative disparity sampled from the dense map")
    y: np.ndarray = Field(..., description="Metric disparity f*B/depth")
    pixels: np.ndarray = Field(..., description="(n, 2) source pixel positions (x, y)")

    @model_validator(mode="after")
    def _check(self) -> "CorrespondenceSet":
        self.x = np.asarray(self.x, dtype=np.float64).reshape(-1)
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        self.pixels = np.asarray(self.pixels, dtype=np.float64).reshape(-1, 2)
        if not (len(self.x) == len(self.y) == len(self.pixels)):
            raise ValueError("correspondence arrays must have equal length")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.y))):
            raise ValueError("correspondences must be finite")
        return self

    def __len__(self) -> int:
        return int(len(self.x))

    @classmethod
    def from_xy(cls, x, y) -> "CorrespondenceSet":
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        return cls(x=x, y=np.asarray(y, dtype=np.float64), pixels=np.zeros((len(x), 2)))


class LinearScaleModel(BaseModel):
    """y = m x + b mapping relative disparity to metric disparity"""
    m: float = Field(..., description="Slope (dimensionless)")
    b: float = Field(..., description="Intercept in pixels")
    estimator: Estimator = Field(..., description="Estimator that produced the model")
    inlier_count: int = Field(..., ge=0, description="Points supporting the model")
    residual_median: float = Field(0.0, description="Median absolute residual over all pairs")
    converged: bool = Field(True, description="False when an iterative estimator hit its iteration cap")

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.m * np.asarray(x, dtype=np.float64) + self.b
