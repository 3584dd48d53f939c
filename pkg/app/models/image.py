from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

BayerPattern = Literal["RGGB", "BGGR", "GRBG", "GBRG"]


class RawBayerImage(BaseModel):
    """Single-channel 16-bit mosaic straight from the sensor"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    pattern: BayerPattern = Field("RGGB", description="Colour filter layout of the top-left 2x2 tile")
    samples: np.ndarray = Field(..., description="(height, width) uint16 intensities")

    @field_validator("samples")
    @classmethod
    def _check_samples(cls, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v)
        if v.ndim != 2:
            raise ValueError("samples must be a 2D array")
        return v.astype(np.uint16, copy=False)

    @property
    def width(self) -> int:
        return int(self.samples.shape[1])

    @property
    def height(self) -> int:
        return int(self.samples.shape[0])


class RgbImage(BaseModel):
    """Channels-first (3, H, W) float image with values in [0, 1]"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    data: np.ndarray = Field(..., description="(3, height, width) float array in [0, 1]")

    @field_validator("data")
    @classmethod
    def _check_data(cls, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.ndim != 3 or v.shape[0] != 3:
            raise ValueError("RGB data must have shape (3, H, W)")
        if v.size and (v.min() < 0.0 or v.max() > 1.0):
            raise ValueError("RGB values must lie in [0, 1]")
        return v

    @property
    def width(self) -> int:
        return int(self.data.shape[2])

    @property
    def height(self) -> int:
        return int(self.data.shape[1])

    def grayscale(self) -> np.ndarray:
        return self.data.mean(axis=0)


class DisparityMap(BaseModel):
    """Per-pixel disparity with a validity mask"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    values: np.ndarray = Field(..., description="(height, width) disparity in pixels")
    valid: np.ndarray = Field(..., description="(height, width) boolean mask")
    frame: Literal["relative", "metric"] = Field("metric", description="Relative (arbitrary affine) or metric disparity")

    @model_validator(mode="after")
    def _check(self) -> "DisparityMap":
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape != np.shape(self.valid):
            raise ValueError("disparity values and mask must be equal-shaped 2D arrays")
        self.valid = np.asarray(self.valid, dtype=bool) & np.isfinite(self.values)
        if self.frame == "metric":
            self.valid &= self.values > 0
        return self

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    @classmethod
    def from_array(cls, values: np.ndarray, frame: str = "metric") -> "DisparityMap":
        values = np.asarray(values, dtype=np.float64)
        return cls(values=values, valid=np.isfinite(values), frame=frame)


class DepthMap(BaseModel):
    """Per-pixel metric depth with a validity mask"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    values: np.ndarray = Field(..., description="(height, width) depth in meters")
    valid: np.ndarray = Field(..., description="(height, width) boolean mask")

    @model_validator(mode="after")
    def _check(self) -> "DepthMap":
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape != np.shape(self.valid):
            raise ValueError("depth values and mask must be equal-shaped 2D arrays")
        self.valid = np.asarray(self.valid, dtype=bool) & np.isfinite(self.values) & (self.values > 0)
        return self

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    @classmethod
    def from_array(cls, values: np.ndarray) -> "DepthMap":
        values = np.asarray(values, dtype=np.float64)
        with np.errstate(invalid="ignore"):
            valid = np.isfinite(values) & (values > 0)
        return cls(values=values, valid=valid)
