from typing import List, Literal

from pydantic import BaseModel, Field

AggregationMode = Literal["pooled", "per-image-mean"]


class MetricsReport(BaseModel):
    """Depth error metrics over jointly valid pixels"""
    mse: float = Field(..., ge=0, description="Mean squared error in cm^2")
    rmse: float = Field(..., ge=0, description="Root mean squared error in cm")
    mare: float = Field(..., ge=0, description="Mean absolute relative error in percent")
    msre: float = Field(..., ge=0, description="Mean squared relative error")
    delta1: float = Field(..., ge=0, description="Percent of pixels with ratio < 1.25")
    delta2: float = Field(..., ge=0, description="Percent of pixels with ratio < 1.25^2")
    delta3: float = Field(..., ge=0, description="Percent of pixels with ratio < 1.25^3")
    bpr: float = Field(..., ge=0, description="Fraction of pixels with relative error above the threshold")
    valid_count: int = Field(..., ge=1, description="Number of jointly valid pixels")
    mode: AggregationMode = Field("pooled", description="How pixels from several images were aggregated")


class ComparisonRow(BaseModel):
    name: str
    report: MetricsReport
    best: List[str] = Field(default_factory=list, description="Columns where this row is best")


class ComparisonTable(BaseModel):
    """Reports ranked by one column with best-per-column marks"""
    sort_by: str
    rows: List[ComparisonRow]
