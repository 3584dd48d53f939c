from typing import Dict, List, Literal, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.models.grid import AxialCoord

DepthSource = Literal["predicted", "stereo-gt", "raytrix", "synthetic"]


class FlowerStack(BaseModel):
    """A central microlens crop stacked with its ring neighbours"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    center: AxialCoord = Field(..., description="Axial coordinate of the central microlens")
    channels: np.ndarray = Field(..., description="(C, H, W) float array, center RGB first")
    centroid_px: Tuple[float, float] = Field(..., description="Pixel position of the central microlens")

    @model_validator(mode="after")
    def _check(self) -> "FlowerStack":
        if self.channels.ndim != 3 or self.channels.shape[0] % 3 != 0:
            raise ValueError("flower stack channels must have shape (3k, H, W)")
        return self

    @property
    def lens_count(self) -> int:
        return self.channels.shape[0] // 3

    def center_patch(self) -> np.ndarray:
        return self.channels[:3]


class FlowerStackBatch(BaseModel):
    """The network input tensor X of shape (N, C, H, W) with per-item keys"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    tensor: np.ndarray = Field(..., description="(N, C, H, W) float32 array")
    coords: np.ndarray = Field(..., description="(N, 2) int array of (q, r)")
    centroids: np.ndarray = Field(..., description="(N, 2) float array of (x, y)")

    @model_validator(mode="after")
    def _check(self) -> "FlowerStackBatch":
        self.tensor = np.asarray(self.tensor, dtype=np.float32)
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
        self.centroids = np.asarray(self.centroids, dtype=np.float64).reshape(-1, 2)
        if self.tensor.ndim != 4:
            raise ValueError("flower stack tensor must be 4D (N, C, H, W)")
        n = self.tensor.shape[0]
        if len(self.coords) != n or len(self.centroids) != n:
            raise ValueError("per-item keys must match the batch size")
        return self

    def __len__(self) -> int:
        return int(self.tensor.shape[0])

    @classmethod
    def from_stacks(cls, stacks: List[FlowerStack]) -> "FlowerStackBatch":
        if not stacks:
            raise ValueError("cannot build a batch from zero stacks")
        return cls(
            tensor=np.stack([s.channels for s in stacks]).astype(np.float32),
            coords=np.array([s.center.to_tuple() for s in stacks], dtype=np.int64),
            centroids=np.array([s.centroid_px for s in stacks], dtype=np.float64),
        )

    def take(self, indices: np.ndarray) -> "FlowerStackBatch":
        indices = np.asarray(indices, dtype=np.int64)
        return FlowerStackBatch(
            tensor=self.tensor[indices],
            coords=self.coords[indices],
            centroids=self.centroids[indices],
        )

    def stack_at(self, i: int) -> FlowerStack:
        q, r = self.coords[i]
        return FlowerStack(
            center=AxialCoord.of(q, r),
            channels=self.tensor[i],
            centroid_px=(float(self.centroids[i, 0]), float(self.centroids[i, 1])),
        )

    def stacks(self) -> List[FlowerStack]:
        return [self.stack_at(i) for i in range(len(self))]


class SparseDepthEntry(BaseModel):
    """One metric depth sample anchored at a microlens centroid"""
    coord: AxialCoord
    centroid_px: Tuple[float, float]
    depth_m: float


class SparseDepthMap(BaseModel):
    """Metric depths at microlens centroids, stored as parallel arrays"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    coords: np.ndarray = Field(..., description="(n, 2) int array of (q, r)")
    centroids: np.ndarray = Field(..., description="(n, 2) float array of (x, y)")
    depths: np.ndarray = Field(..., description="(n,) depth in meters")
    source: DepthSource = Field("predicted", description="Where the depths come from")

    @model_validator(mode="after")
    def _check(self) -> "SparseDepthMap":
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
        self.centroids = np.asarray(self.centroids, dtype=np.float64).reshape(-1, 2)
        self.depths = np.asarray(self.depths, dtype=np.float64).reshape(-1)
        if not (len(self.coords) == len(self.centroids) == len(self.depths)):
            raise ValueError("sparse depth arrays must have equal length")
        if len(self.depths) and not (np.all(np.isfinite(self.depths)) and np.all(self.depths > 0)):
            raise ValueError("sparse depths must be positive and finite")
        return self

    def __len__(self) -> int:
        return int(len(self.depths))

    @classmethod
    def empty(cls, source: DepthSource = "predicted") -> "SparseDepthMap":
        return cls(coords=np.zeros((0, 2)), centroids=np.zeros((0, 2)), depths=np.zeros(0), source=source)

    def keys(self) -> List[Tuple[int, int]]:
        return [(int(q), int(r)) for q, r in self.coords]

    def depth_by_key(self) -> Dict[Tuple[int, int], float]:
        return {k: float(d) for k, d in zip(self.keys(), self.depths)}

    def subset(self, mask: np.ndarray) -> "SparseDepthMap":
        mask = np.asarray(mask)
        return SparseDepthMap(
            coords=self.coords[mask],
            centroids=self.centroids[mask],
            depths=self.depths[mask],
            source=self.source,
        )

    @property
    def entries(self) -> List[SparseDepthEntry]:
        return [
            SparseDepthEntry(coord=AxialCoord.of(q, r), centroid_px=(float(x), float(y)), depth_m=float(d))
            for (q, r), (x, y), d in zip(self.coords, self.centroids, self.depths)
        ]
