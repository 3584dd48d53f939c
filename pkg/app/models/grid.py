from typing import Dict, List, Literal, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PrivateAttr


class AxialCoord(BaseModel):
    """Axial hex coordinate of a microlens (interlaced-row lattice)"""
    model_config = ConfigDict(frozen=True)

    q: int = Field(..., description="Axial column")
    r: int = Field(..., description="Axial row")

    def __add__(self, other: "AxialCoord") -> "AxialCoord":
        return AxialCoord(q=self.q + other.q, r=self.r + other.r)

    def to_tuple(self) -> Tuple[int, int]:
        return (self.q, self.r)

    @classmethod
    def of(cls, q: int, r: int) -> "AxialCoord":
        return cls(q=int(q), r=int(r))


class GridCalibration(BaseModel):
    """2D calibration of the microlens pattern on the sensor"""
    model_config = ConfigDict(frozen=True)

    origin: Tuple[float, float] = Field(..., description="Pixel position (x, y) of the reference microlens centroid")
    pitch: float = Field(..., gt=0, description="Center-to-center microlens spacing in pixels")
    rotation: float = Field(0.0, description="Lattice rotation in radians")
    rows: int = Field(..., ge=1, description="Lattice rows")
    cols: int = Field(..., ge=1, description="Lattice columns")
    sensor_width: int = Field(..., ge=1, description="Sensor width in pixels")
    sensor_height: int = Field(..., ge=1, description="Sensor height in pixels")
    lattice: Literal["pointy", "flat"] = Field("pointy", description="Interlaced rows (pointy) or interlaced columns (flat)")


class MicrolensGrid(BaseModel):
    """Immutable set of microlenses that survived the sensor boundary check.

    Lenses are stored as parallel arrays in row-major lattice order; an index
    keyed by (q, r) gives O(1) lookup.
    """
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    calibration: GridCalibration
    axial: np.ndarray = Field(..., description="(n, 2) int array of (q, r)")
    centroids: np.ndarray = Field(..., description="(n, 2) float array of (x, y) pixel positions")

    _index: Dict[Tuple[int, int], int] = PrivateAttr(default_factory=dict)

    def model_post_init(self, __context) -> None:
        if self.axial.shape != self.centroids.shape or self.axial.ndim != 2 or self.axial.shape[1] != 2:
            raise ValueError("axial and centroids must both have shape (n, 2)")
        self.axial.setflags(write=False)
        self.centroids.setflags(write=False)
        self._index = {(int(q), int(r)): i for i, (q, r) in enumerate(self.axial)}
        if len(self._index) != len(self.axial):
            raise ValueError("duplicate axial coordinates in grid")

    def __len__(self) -> int:
        return len(self.axial)

    def __contains__(self, a: AxialCoord) -> bool:
        return (a.q, a.r) in self._index

    def index_of(self, a: AxialCoord) -> int:
        """Return the lens index of ``a`` or -1 when absent."""
        return self._index.get((a.q, a.r), -1)

    def centroid_of(self, a: AxialCoord) -> Tuple[float, float]:
        i = self._index[(a.q, a.r)]
        return (float(self.centroids[i, 0]), float(self.centroids[i, 1]))

    @property
    def lenses(self) -> List[Tuple[AxialCoord, Tuple[float, float]]]:
        return [
            (AxialCoord.of(q, r), (float(x), float(y)))
            for (q, r), (x, y) in zip(self.axial, self.centroids)
        ]
