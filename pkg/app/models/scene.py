from typing import List, Optional, Tuple

from pydantic import BaseModel, Field, model_validator

from app.models.camera import StereoRig

_UNBOUNDED = (-1e9, 1e9, -1e9, 1e9)


class TexturedPlane(BaseModel):
    """Fronto-parallel plane z = depth_m in the plenoptic camera frame"""
    depth_m: float = Field(..., gt=0)
    texture_seed: int = 0
    texture_scale_m: float = Field(0.01, gt=0, description="Value-noise cell size in meters")
    extent: Tuple[float, float, float, float] = Field(_UNBOUNDED, description="(x_min, x_max, y_min, y_max) in meters")
    textured: bool = Field(True, description="False renders a uniform grey plane")


class SyntheticScene(BaseModel):
    """Planes plus the plenoptic and stereo projection parameters"""
    planes: List[TexturedPlane] = Field(..., min_length=1)
    lens_baseline_m: float = Field(0.002, gt=0, description="World spacing between adjacent microlens pinholes")
    microlens_focal_px: float = Field(250.0, gt=0, description="Focal length of each microlens pinhole in pixels")
    rig: Optional[StereoRig] = Field(None, description="Stereo rig for stereo rendering")

    @model_validator(mode="after")
    def _depth_order(self) -> "SyntheticScene":
        # nearest first, so ray casting can stop at the first hit
        self.planes = sorted(self.planes, key=lambda p: p.depth_m)
        return self

    def world_per_pixel(self, pitch_px: float) -> float:
        """Lateral world distance represented by one sensor pixel of lens spacing."""
        return self.lens_baseline_m / pitch_px
