from pydantic import BaseModel, Field, conlist
from typing import List, Optional

from app.models.alignment import Estimator
from app.models.metrics import MetricsReport


class AlignResponse(BaseModel):
    """Response model for the align endpoint"""
    m: float = Field(..., description="Slope of the relative-to-metric disparity model")
    b: float = Field(..., description="Intercept in pixels")
    estimator: Estimator = Field(..., description="Estimator that produced the model")
    inlier_count: int = Field(..., description="Correspondences supporting the model")
    residual_median: float = Field(..., description="Median absolute residual in pixels")
    converged: bool = Field(True, description="False when an iterative estimator hit its iteration cap")
    correspondence_count: int = Field(..., description="Sparse samples that hit valid dense pixels")


class EvaluateResponse(BaseModel):
    """Response model for the evaluate endpoint"""
    report: MetricsReport = Field(..., description="Metrics over jointly valid pixels")
    success: bool = Field(True, description="Whether the evaluation was successful")


class VirtualDepthRequest(BaseModel):
    """Request model for the virtual depth conversion endpoint"""
    virtual_depths: conlist(float, min_length=1) = Field(
        ..., description="Virtual depths in multiples of the MLA-sensor spacing"
    )
    focal_length_m: float = Field(0.035, gt=0, description="Main-lens focal length")
    mla_distance_m: float = Field(0.05, gt=0, description="Main-lens to MLA distance")
    mla_sensor_spacing_m: float = Field(0.0005, gt=0, description="MLA to sensor spacing")


class VirtualDepthResponse(BaseModel):
    """Response model for the virtual depth conversion endpoint"""
    metric_depths: List[float] = Field(..., description="Object depths in meters, one per input")
    error_message: Optional[str] = Field(None, description="Error message if any")
